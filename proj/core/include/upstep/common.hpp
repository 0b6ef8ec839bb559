#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace upstep {

// Error taxonomy. Everything derives from std::runtime_error so callers that
// don't care about the distinction can catch one type.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// "[3 x 4]" style shape rendering for error messages.
std::string shape_str(const std::vector<std::size_t>& shape);

// splitmix64 step; used to derive decorrelated sub-seeds from a master seed.
std::uint64_t splitmix64(std::uint64_t& state);

// Stable sub-seed for a named stream (e.g. "shuffle", "augment") plus an index.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream, std::uint64_t index = 0);

// FNV-1a over raw bytes; used to fingerprint parameter state in tests.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ull);

// Pearson correlation coefficient. Throws ContractError on size mismatch or
// n < 2, NumericError if either series has zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

}  // namespace upstep
