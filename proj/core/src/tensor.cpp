#include "tensor_impl.hpp"

#include <algorithm>
#include <cmath>

namespace upstep {

namespace detail {

namespace {
thread_local std::vector<Tape*> g_tape_stack;
thread_local int g_no_grad_depth = 0;
}  // namespace

ImplPtr make_impl(std::vector<std::size_t> shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor shape has a zero dimension: " + shape_str(shape));
    n *= d;
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(n, 0.0);
  return impl;
}

void check_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2)
    throw ShapeError(std::string(op) + ": expected a 2-d tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

using detail::Access;
using detail::ImplPtr;

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  auto impl = detail::make_impl(std::move(shape));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
  auto impl = detail::make_impl(std::move(shape));
  std::fill(impl->data.begin(), impl->data.end(), value);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> values,
                         bool requires_grad) {
  auto impl = detail::make_impl(std::move(shape));
  if (values.size() != impl->data.size())
    throw ShapeError("from_data: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(impl->shape));
  impl->data.assign(values.begin(), values.end());
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const {
  if (!impl_) throw ContractError("shape() on an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::ndim() const { return shape().size(); }

std::size_t Tensor::numel() const {
  if (!impl_) throw ContractError("numel() on an undefined tensor");
  return impl_->numel();
}

std::size_t Tensor::rows() const {
  detail::check_2d(*this, "rows");
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  detail::check_2d(*this, "cols");
  return impl_->shape[1];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
bool Tensor::is_leaf() const { return impl_ && impl_->leaf; }

void Tensor::set_requires_grad(bool value) {
  if (!impl_) throw ContractError("set_requires_grad() on an undefined tensor");
  if (!impl_->leaf)
    throw ContractError("set_requires_grad: only leaf tensors may change grad mode");
  impl_->requires_grad = value;
  if (!value) impl_->grad.reset();
}

std::span<double> Tensor::values() {
  if (!impl_) throw ContractError("values() on an undefined tensor");
  return {impl_->data.data(), impl_->data.size()};
}

std::span<const double> Tensor::values() const {
  if (!impl_) throw ContractError("values() on an undefined tensor");
  return {impl_->data.data(), impl_->data.size()};
}

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements, expected 1");
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  if (!impl_) throw ContractError("at() on an undefined tensor");
  if (idx.size() != impl_->shape.size())
    throw ShapeError("at(): " + std::to_string(idx.size()) + " indices for shape " +
                     shape_str(impl_->shape));
  std::size_t flat = 0, i = 0;
  for (std::size_t v : idx) {
    if (v >= impl_->shape[i])
      throw ShapeError("at(): index " + std::to_string(v) + " out of range for dim " +
                       std::to_string(i) + " of " + shape_str(impl_->shape));
    flat = flat * impl_->shape[i] + v;
    ++i;
  }
  return impl_->data[flat];
}

bool Tensor::has_grad() const { return impl_ && impl_->grad != nullptr; }

std::span<const double> Tensor::grad() const {
  if (!has_grad())
    throw ContractError("grad(): no gradient present (did backward() reach this tensor?)");
  return {impl_->grad->data(), impl_->grad->size()};
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.reset();
}

Tensor Tensor::clone() const {
  if (!impl_) return {};
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  impl->leaf = true;
  return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
  if (!impl_) return {};
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = false;
  impl->leaf = true;
  return Tensor(std::move(impl));
}

const void* Tensor::data_ptr() const { return impl_ ? impl_->data.data() : nullptr; }

// ---- Tape -------------------------------------------------------------------

struct Tape::Entry {
  ImplPtr out;
  std::function<void()> backward;
};

Tape::Tape() {
  detail::g_tape_stack.push_back(this);
}

Tape::~Tape() {
  // Destruction order is LIFO for stack-allocated tapes; guard anyway.
  auto& stack = detail::g_tape_stack;
  auto it = std::find(stack.rbegin(), stack.rend(), this);
  if (it != stack.rend()) stack.erase(std::next(it).base());
}

Tape* Tape::active() {
  return detail::g_tape_stack.empty() ? nullptr : detail::g_tape_stack.back();
}

std::size_t Tape::size() const { return entries_.size(); }

void Tape::backward(const Tensor& loss) {
  const ImplPtr& impl = Access::impl(loss);
  if (!impl) throw ContractError("backward: loss tensor is undefined");
  if (impl->numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(impl->shape));
  if (!impl->requires_grad || impl->leaf)
    throw ContractError("backward: loss was not produced by ops recorded on this tape");
  if (!std::isfinite(impl->data[0]))
    throw NumericError("backward: loss is not finite (" + std::to_string(impl->data[0]) + ")");

  // Reset interior gradients so repeated calls re-derive them from scratch;
  // leaf gradients are left alone and accumulate.
  for (auto& e : entries_) {
    if (e.out->grad) std::fill(e.out->grad->begin(), e.out->grad->end(), 0.0);
  }
  impl->ensure_grad()[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
}

namespace detail {

void Access::record(Tape& tape, ImplPtr out, std::function<void()> backward) {
  tape.entries_.push_back(Tape::Entry{std::move(out), std::move(backward)});
}

Tensor finish_op(ImplPtr out, bool needs_grad, std::function<void()> backward) {
  Tape* tape = Tape::active();
  if (needs_grad && grad_recording_enabled() && tape) {
    out->requires_grad = true;
    out->leaf = false;
    Access::record(*tape, out, std::move(backward));
  } else {
    out->requires_grad = false;
    out->leaf = true;
  }
  return Access::wrap(std::move(out));
}

}  // namespace detail

NoGradGuard::NoGradGuard() { ++detail::g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --detail::g_no_grad_depth; }

bool grad_recording_enabled() { return detail::g_no_grad_depth == 0; }

}  // namespace upstep
