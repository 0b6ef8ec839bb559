#include <cmath>
#include <limits>
#include <random>

#include <upstep/ssl.hpp>

#include "doctest.h"
#include "gradcheck.hpp"

using namespace upstep;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double lo = -2.0,
                     double hi = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t = Tensor::zeros({r, c});
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

double column_sum_variance(const Tensor& m) {
  const std::size_t r = m.rows(), c = m.cols();
  const auto v = std::as_const(m).values();
  std::vector<double> col(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) col[j] += v[i * c + j];
  double mean = 0.0;
  for (double x : col) mean += x;
  mean /= static_cast<double>(c);
  double var = 0.0;
  for (double x : col) var += (x - mean) * (x - mean);
  return var / static_cast<double>(c);
}

}  // namespace

TEST_SUITE_BEGIN("ssl");

TEST_CASE("prototypes are unit rows, deterministic, and transposed consistently") {
  PrototypeBank bank = make_prototypes(24, 16, 5);
  CHECK(bank.k() == 24);
  CHECK(bank.dim() == 16);
  const auto cv = std::as_const(bank.c).values();
  for (std::size_t i = 0; i < 24; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < 16; ++j) ss += cv[i * 16 + j] * cv[i * 16 + j];
    CHECK(std::sqrt(ss) == doctest::Approx(1.0).epsilon(1e-12));
  }
  for (std::size_t i = 0; i < 24; ++i)
    for (std::size_t j = 0; j < 16; ++j) CHECK(bank.c.at({i, j}) == bank.c_t.at({j, i}));

  PrototypeBank again = make_prototypes(24, 16, 5);
  for (std::size_t i = 0; i < cv.size(); ++i)
    CHECK(cv[i] == std::as_const(again.c).values()[i]);
  PrototypeBank other = make_prototypes(24, 16, 6);
  bool differs = false;
  for (std::size_t i = 0; i < cv.size(); ++i)
    differs |= (cv[i] != std::as_const(other.c).values()[i]);
  CHECK(differs);

  CHECK_THROWS_AS(make_prototypes(1, 16, 1), ContractError);
  CHECK_THROWS_AS(make_prototypes(8, 1, 1), ContractError);
}

TEST_CASE("prototype_scores computes cosine against the bank when normalizing") {
  PrototypeBank bank;
  bank.c = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  bank.c_t = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor z = Tensor::from_data({1, 2}, {3, 4});
  Tensor s_norm = prototype_scores(z, bank, true);
  CHECK(s_norm.at({0, 0}) == doctest::Approx(0.6));
  CHECK(s_norm.at({0, 1}) == doctest::Approx(0.8));
  Tensor s_raw = prototype_scores(z, bank, false);
  CHECK(s_raw.at({0, 0}) == doctest::Approx(3.0));
  CHECK(s_raw.at({0, 1}) == doctest::Approx(4.0));
  CHECK_THROWS_AS(prototype_scores(Tensor::zeros({1, 3}), bank, true), ShapeError);
}

TEST_CASE("online_assign is a tempered softmax over prototype scores") {
  PrototypeBank bank = make_prototypes(8, 4, 3);
  Tensor z = random_matrix(5, 4, 9, 0.2, 1.0);
  const double tau = 0.1;
  Tensor p = online_assign(z, bank, tau);
  REQUIRE(p.shape() == std::vector<std::size_t>{5, 8});

  // across every row: sums to one, matches a manual softmax of cos/tau
  Tensor zh = normalize_rows(z);
  Tensor manual = softmax_rows(div(matmul(zh, bank.c_t), tau));
  const auto pv = std::as_const(p).values(), mv = std::as_const(manual).values();
  for (std::size_t i = 0; i < pv.size(); ++i) CHECK(pv[i] == doctest::Approx(mv[i]).epsilon(1e-12));
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 8; ++c) s += p.at({r, c});
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }

  CHECK_THROWS_AS(online_assign(z, bank, 0.0), ContractError);
  CHECK_THROWS_AS(online_assign(z, bank, -1.0), ContractError);
}

TEST_CASE("online_assign exposes detached raw scores and keeps the graph on p") {
  PrototypeBank bank = make_prototypes(6, 4, 3);
  Tensor z = random_matrix(3, 4, 10, 0.2, 1.0);
  z.set_requires_grad(true);
  Tape tape;
  Tensor scores;
  Tensor p = online_assign(z, bank, 0.5, &scores);
  CHECK(p.requires_grad());
  CHECK_FALSE(scores.requires_grad());
  Tensor manual = matmul(normalize_rows(z), bank.c_t);
  const auto sv = std::as_const(scores).values(), mv = std::as_const(manual).values();
  for (std::size_t i = 0; i < sv.size(); ++i) CHECK(sv[i] == doctest::Approx(mv[i]).epsilon(1e-12));
}

TEST_CASE("sinkhorn rows are probability vectors") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tensor scores = random_matrix(16, 8, 100 + seed);
    Tensor q = sinkhorn_knopp(scores, {0.3, 3});
    REQUIRE(q.shape() == scores.shape());
    const auto qv = std::as_const(q).values();
    for (std::size_t i = 0; i < 16; ++i) {
      double rs = 0.0;
      for (std::size_t j = 0; j < 8; ++j) {
        CHECK(qv[i * 8 + j] >= 0.0);
        rs += qv[i * 8 + j];
      }
      CHECK(std::abs(rs - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("sinkhorn with many iterations equalizes column mass to B/K") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor scores = random_matrix(16, 8, 200 + seed);
    Tensor q = sinkhorn_knopp(scores, {0.3, 200});
    const auto qv = std::as_const(q).values();
    for (std::size_t j = 0; j < 8; ++j) {
      double cs = 0.0;
      for (std::size_t i = 0; i < 16; ++i) cs += qv[i * 8 + j];
      CHECK(std::abs(cs - 2.0) < 1e-6);  // B/K = 16/8
    }
  }
}

TEST_CASE("sinkhorn is invariant to a constant score shift") {
  // The max-shift cancels any additive constant mathematically; rounding of
  // s + c leaves only ULP-level residue, so demand near-bit agreement. An
  // unshifted exp would instead overflow outright on the large-shift case.
  Tensor scores = random_matrix(12, 6, 42);
  for (double c : {123.456, 1e4}) {
    Tensor shifted = add(scores, c);
    Tensor q1 = sinkhorn_knopp(scores, {0.3, 3});
    Tensor q2 = sinkhorn_knopp(shifted, {0.3, 3});
    const auto a = std::as_const(q1).values(), b = std::as_const(q2).values();
    // (s + c) - (max + c) carries ~ulp(c) of rounding, amplified by 1/eps in
    // the exponent; bound the residue accordingly.
    const double tol = 64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, c) / 0.3;
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(std::abs(a[i] - b[i]) <= tol * std::max(1.0, std::abs(a[i])));
  }
}

TEST_CASE("sinkhorn output is detached even under an active tape") {
  Tensor scores = random_matrix(4, 3, 7);
  scores.set_requires_grad(true);
  Tape tape;
  Tensor through = mul(scores, 1.0);  // life on the tape
  Tensor q = sinkhorn_knopp(through, {0.3, 3});
  CHECK_FALSE(q.requires_grad());
  CHECK(q.is_leaf());
}

TEST_CASE("sinkhorn input validation") {
  Tensor scores = random_matrix(4, 3, 7);
  CHECK_THROWS_AS(sinkhorn_knopp(scores, {0.0, 3}), ContractError);
  CHECK_THROWS_AS(sinkhorn_knopp(scores, {-0.3, 3}), ContractError);
  CHECK_THROWS_AS(sinkhorn_knopp(scores, {0.3, 0}), ContractError);
  CHECK_THROWS_AS(sinkhorn_knopp(Tensor::zeros({4}), {0.3, 3}), ShapeError);
  Tensor inf_scores = Tensor::from_data({1, 2}, {1.0, 1e308 * 10});
  CHECK_THROWS_AS(sinkhorn_knopp(inf_scores, {0.3, 3}), NumericError);
}

TEST_CASE("sinkhorn balances cluster usage better than a tempered softmax, in aggregate") {
  // Equipartitioning claim, measured across 100 random 16x8 instances at the
  // same temperature. Individual instances may go either way; the aggregate
  // count must be overwhelming.
  int sinkhorn_wins = 0;
  double var_sk_total = 0.0, var_sm_total = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Tensor scores = random_matrix(16, 8, 3000 + seed);
    Tensor q = sinkhorn_knopp(scores, {0.3, 3});
    Tensor p = softmax_rows(div(scores, 0.3));
    const double vq = column_sum_variance(q), vp = column_sum_variance(p);
    var_sk_total += vq;
    var_sm_total += vp;
    if (vq < vp) ++sinkhorn_wins;
  }
  CHECK(sinkhorn_wins >= 95);
  CHECK(var_sk_total < var_sm_total);
}

TEST_CASE("cluster_ce_loss matches the hand formula and respects the clamp") {
  Tensor p = Tensor::from_data({2, 2}, {0.75, 0.25, 0.5, 0.5});
  Tensor t = Tensor::from_data({2, 2}, {1.0, 0.0, 0.5, 0.5});
  const double expect =
      -0.5 * (1.0 * std::log(0.75) + 0.0 + 0.5 * std::log(0.5) + 0.5 * std::log(0.5));
  CHECK(cluster_ce_loss(p, t).item() == doctest::Approx(expect).epsilon(1e-12));

  // zero probability mass survives through the clamp
  Tensor pz = Tensor::from_data({1, 2}, {0.0, 1.0});
  Tensor tz = Tensor::from_data({1, 2}, {0.5, 0.5});
  const double clamped = -(0.5 * std::log(1e-12) + 0.5 * 0.0);
  CHECK(cluster_ce_loss(pz, tz).item() == doctest::Approx(clamped).epsilon(1e-12));
}

TEST_CASE("cluster_ce_loss rejects live targets and shape mismatches") {
  Tensor logits = random_matrix(3, 4, 12);
  logits.set_requires_grad(true);
  Tape tape;
  Tensor p = softmax_rows(logits);
  Tensor live_targets = softmax_rows(mul(logits, 0.5));
  CHECK_THROWS_AS(cluster_ce_loss(p, live_targets), ContractError);
  CHECK_NOTHROW(cluster_ce_loss(p, live_targets.detach()));
  CHECK_THROWS_AS(cluster_ce_loss(p, Tensor::zeros({3, 5})), ShapeError);
}

TEST_CASE("gradient flows through the online assignments into projections") {
  PrototypeBank bank = make_prototypes(6, 4, 8);
  std::mt19937_64 rng(55);
  std::vector<Tensor> in{gradcheck::uniform({3, 4}, rng, 0.3, 1.2)};
  Tensor targets = sinkhorn_knopp(random_matrix(3, 6, 77), {0.3, 3});
  auto res = gradcheck::check(
      [&](const std::vector<Tensor>& t) {
        Tensor p = online_assign(t[0], bank, 0.4);
        return cluster_ce_loss(p, targets);
      },
      in);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_SUITE_END();
