#pragma once

// Internal storage and tape plumbing shared by the op translation units.
// Not installed; public API lives in upstep/tensor.hpp.

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "upstep/tensor.hpp"

namespace upstep::detail {

// Fixed 64-byte alignment for every numeric buffer Eigen may map. With wide
// SIMD, Eigen picks peel/remainder splits from the pointer's alignment, so
// malloc's varying alignment would change floating-point accumulation order
// between otherwise identical runs; pinning the alignment keeps results
// bitwise reproducible (and fast).
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

using DataVec = std::vector<double, AlignedAllocator<double>>;

struct TensorImpl {
  std::vector<std::size_t> shape;
  DataVec data;
  std::unique_ptr<DataVec> grad;  // lazily allocated
  bool requires_grad = false;
  bool leaf = true;

  std::size_t numel() const { return data.size(); }
  DataVec& ensure_grad() {
    if (!grad) grad = std::make_unique<DataVec>(data.size(), 0.0);
    return *grad;
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

struct Access {
  static const ImplPtr& impl(const Tensor& t) { return t.impl_; }
  static Tensor wrap(ImplPtr impl) { return Tensor(std::move(impl)); }
  static void record(Tape& tape, ImplPtr out, std::function<void()> backward);
};

ImplPtr make_impl(std::vector<std::size_t> shape);

// Marks `out` as a tape-produced node and records the closure if recording is
// live and any input needs a gradient. `needs_grad` is the OR over inputs.
Tensor finish_op(ImplPtr out, bool needs_grad, std::function<void()> backward);

inline bool wants_grad(const Tensor& t) {
  return grad_recording_enabled() && Tape::active() != nullptr && t.requires_grad();
}

// Eigen views over tensor storage (row-major, no copy).
using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

inline ECMap mat_view(const TensorImpl& t, std::size_t r, std::size_t c) {
  return ECMap(t.data.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline EMap mat_view_mut(DataVec& buf, std::size_t r, std::size_t c) {
  return EMap(buf.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void check_2d(const Tensor& t, const char* op);

}  // namespace upstep::detail
