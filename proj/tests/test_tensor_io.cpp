#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include <upstep/tensor_io.hpp>

#include "doctest.h"

using namespace upstep;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
  static std::mt19937_64 rng(std::random_device{}());
  return fs::temp_directory_path() / (std::string("uptn_test_") + name + "_" +
                                      std::to_string(rng()) + ".uptn");
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_SUITE_BEGIN("tensor_io");

TEST_CASE("f64 round trip is bit exact") {
  const fs::path p = temp_file("f64");
  Tensor t = Tensor::from_data({2, 3}, {1.5, -2.25, 3.125, 0.0, 1e-300, -1e300});
  save_tensor(p, t, Dtype::F64);
  Tensor r = load_tensor(p);
  REQUIRE(r.shape() == t.shape());
  auto a = std::as_const(t).values(), b = std::as_const(r).values();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  fs::remove(p);
}

TEST_CASE("f32 round trip preserves f32-representable values exactly") {
  const fs::path p = temp_file("f32");
  // Every value here is a dyadic rational well inside float range.
  Tensor t = Tensor::from_data({4}, {0.5, -0.25, 127.0, 0.0078125});
  save_tensor(p, t, Dtype::F32);
  Tensor r = load_tensor(p);
  auto a = std::as_const(t).values(), b = std::as_const(r).values();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  fs::remove(p);
}

TEST_CASE("f32 files are half the payload size") {
  const fs::path p32 = temp_file("sz32"), p64 = temp_file("sz64");
  Tensor t = Tensor::zeros({16, 16});
  save_tensor(p32, t, Dtype::F32);
  save_tensor(p64, t, Dtype::F64);
  const auto header = 4 + 1 + 1 + 1 + 1 + 2 * 8;
  CHECK(fs::file_size(p32) == header + 256 * 4);
  CHECK(fs::file_size(p64) == header + 256 * 8);
  fs::remove(p32);
  fs::remove(p64);
}

TEST_CASE("header layout is as documented") {
  const fs::path p = temp_file("hdr");
  save_tensor(p, Tensor::from_data({2, 1}, {1.0, 2.0}), Dtype::F32);
  auto bytes = slurp(p);
  REQUIRE(bytes.size() >= 24);
  CHECK(bytes[0] == 'U');
  CHECK(bytes[1] == 'P');
  CHECK(bytes[2] == 'T');
  CHECK(bytes[3] == 'N');
  CHECK(bytes[4] == 1);  // version
  CHECK(bytes[5] == 0);  // dtype f32
  CHECK(bytes[6] == 2);  // ndim
  CHECK(bytes[7] == 0);  // reserved
  // little-endian u64 dims: 2, then 1
  CHECK(static_cast<unsigned char>(bytes[8]) == 2);
  CHECK(static_cast<unsigned char>(bytes[16]) == 1);
  fs::remove(p);
}

TEST_CASE("malformed files are rejected with the path in the message") {
  const fs::path p = temp_file("bad");
  Tensor t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  save_tensor(p, t, Dtype::F64);
  auto good = slurp(p);

  SUBCASE("missing file") {
    CHECK_THROWS_WITH_AS(load_tensor(p.string() + ".nope"), doctest::Contains(".nope"),
                         FormatError);
  }
  SUBCASE("bad magic") {
    auto bytes = good;
    bytes[0] = 'X';
    spit(p, bytes);
    CHECK_THROWS_AS(load_tensor(p), FormatError);
  }
  SUBCASE("unknown version") {
    auto bytes = good;
    bytes[4] = 9;
    spit(p, bytes);
    CHECK_THROWS_AS(load_tensor(p), FormatError);
  }
  SUBCASE("unknown dtype") {
    auto bytes = good;
    bytes[5] = 7;
    spit(p, bytes);
    CHECK_THROWS_AS(load_tensor(p), FormatError);
  }
  SUBCASE("nonzero reserved byte") {
    auto bytes = good;
    bytes[7] = 1;
    spit(p, bytes);
    CHECK_THROWS_AS(load_tensor(p), FormatError);
  }
  SUBCASE("truncated payload") {
    auto bytes = good;
    bytes.resize(bytes.size() - 5);
    spit(p, bytes);
    CHECK_THROWS_WITH_AS(load_tensor(p), doctest::Contains(p.string().c_str()), FormatError);
  }
  SUBCASE("trailing garbage") {
    auto bytes = good;
    bytes.push_back('z');
    spit(p, bytes);
    CHECK_THROWS_AS(load_tensor(p), FormatError);
  }
  SUBCASE("truncated header") {
    spit(p, {'U', 'P', 'T', 'N', 1});
    CHECK_THROWS_AS(load_tensor(p), FormatError);
  }
  SUBCASE("zero dimension") {
    auto bytes = good;
    for (int i = 0; i < 8; ++i) bytes[8 + i] = 0;  // first dim -> 0
    spit(p, bytes);
    CHECK_THROWS_AS(load_tensor(p), FormatError);
  }
  fs::remove(p);
}

TEST_CASE("loaded tensors are inert leaves") {
  const fs::path p = temp_file("inert");
  Tensor t = Tensor::from_data({3}, {1, 2, 3}, true);
  save_tensor(p, t);
  Tensor r = load_tensor(p);
  CHECK(r.is_leaf());
  CHECK_FALSE(r.requires_grad());
  fs::remove(p);
}

TEST_SUITE_END();
