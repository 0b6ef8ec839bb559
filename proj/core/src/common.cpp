#include "upstep/common.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace upstep {

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view stream, std::uint64_t index) {
  // Fold the stream name into the master seed, mix once so nearby masters
  // decorrelate, then fold the index. Distinct indices give distinct states,
  // and the splitmix output function is a bijection, so no two indices of the
  // same stream can collide.
  std::uint64_t s = master ^ fnv1a(stream.data(), stream.size());
  splitmix64(s);
  s ^= index;
  return splitmix64(s);
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size())
    throw ContractError("pearson: series lengths differ (" + std::to_string(x.size()) + " vs " +
                        std::to_string(y.size()) + ")");
  const std::size_t n = x.size();
  if (n < 2) throw ContractError("pearson: need at least 2 points, got " + std::to_string(n));
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("pearson: zero variance in input series");
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace upstep
