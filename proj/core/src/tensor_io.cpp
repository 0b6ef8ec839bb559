#include "upstep/tensor_io.hpp"

#include <cstring>
#include <fstream>
#include <limits>

namespace upstep {

namespace {

constexpr unsigned char kMagic[4] = {0x55, 0x50, 0x54, 0x4e};  // "UPTN"
constexpr std::uint8_t kVersion = 1;

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& what) {
  throw FormatError(path.string() + ": " + what);
}

}  // namespace

void save_tensor(const std::filesystem::path& path, const Tensor& t, Dtype dtype) {
  if (!t.defined()) throw ContractError("save_tensor: undefined tensor");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(path, "cannot open for writing");
  const auto& shape = t.shape();
  if (shape.size() > 255) fail(path, "rank exceeds format limit of 255");
  unsigned char header[8] = {kMagic[0], kMagic[1], kMagic[2], kMagic[3],
                             kVersion, static_cast<unsigned char>(dtype),
                             static_cast<unsigned char>(shape.size()), 0};
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  for (std::size_t d : shape) {
    const auto v = static_cast<std::uint64_t>(d);
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  const auto vals = t.values();
  if (dtype == Dtype::F64) {
    out.write(reinterpret_cast<const char*>(vals.data()),
              static_cast<std::streamsize>(vals.size() * sizeof(double)));
  } else {
    std::vector<float> f(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) f[i] = static_cast<float>(vals[i]);
    out.write(reinterpret_cast<const char*>(f.data()),
              static_cast<std::streamsize>(f.size() * sizeof(float)));
  }
  if (!out) fail(path, "write failed");
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open");
  unsigned char header[8];
  in.read(reinterpret_cast<char*>(header), sizeof header);
  if (in.gcount() != sizeof header) fail(path, "truncated header");
  if (std::memcmp(header, kMagic, 4) != 0) fail(path, "bad magic, not a UPTN file");
  if (header[4] != kVersion)
    fail(path, "unsupported version " + std::to_string(header[4]));
  if (header[5] > 1) fail(path, "unknown dtype code " + std::to_string(header[5]));
  const auto dtype = static_cast<Dtype>(header[5]);
  const std::size_t ndim = header[6];
  if (ndim == 0) fail(path, "zero-rank tensor");
  if (header[7] != 0) fail(path, "reserved header byte is not zero");

  std::vector<std::size_t> shape(ndim);
  std::size_t numel = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    std::uint64_t d = 0;
    in.read(reinterpret_cast<char*>(&d), sizeof d);
    if (in.gcount() != sizeof d) fail(path, "truncated dimension list");
    if (d == 0) fail(path, "zero-sized dimension");
    if (d > std::numeric_limits<std::size_t>::max() / (numel ? numel : 1))
      fail(path, "dimension overflow");
    shape[i] = static_cast<std::size_t>(d);
    numel *= shape[i];
  }

  std::vector<double> values(numel);
  if (dtype == Dtype::F64) {
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != numel * sizeof(double))
      fail(path, "truncated payload");
  } else {
    std::vector<float> f(numel);
    in.read(reinterpret_cast<char*>(f.data()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != numel * sizeof(float))
      fail(path, "truncated payload");
    for (std::size_t i = 0; i < numel; ++i) values[i] = static_cast<double>(f[i]);
  }
  char extra;
  if (in.read(&extra, 1) && in.gcount() == 1) fail(path, "trailing bytes after payload");
  return Tensor::from_data(std::move(shape), std::move(values));
}

}  // namespace upstep
