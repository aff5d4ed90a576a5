// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "flexcare/autodiff.hpp"
#include "flexcare/params.hpp"
#include "oracles.hpp"

using namespace flexcare;
using ad::Tape;
using ad::Var;
using VV = std::vector<Var>;

// Relative error bound for central differences with step 1e-5.
constexpr double kTol = 1e-4;

namespace {
std::mt19937_64 rng(11);
Matrix<double> rnd(std::size_t r, std::size_t c) { return oracle::random_matrix(r, c, rng); }

// Nonlinear scalar readout so each entry sees a distinct upstream gradient.
Var readout(Tape<double>& t, Var x) {
  const auto& v = t.value(x);
  Matrix<double> w(v.cols(), 2);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.17 * double(i);
  return ad::sum(t, ad::tanh(t, ad::matmul(t, x, t.constant(w))));
}
}  // namespace

TEST_CASE("matmul family gradients") {
  REQUIRE(oracle::fd_max_rel_error({rnd(3, 4), rnd(4, 2)},
                                   [](Tape<double>& t, const VV& v) { return readout(t, ad::matmul(t, v[0], v[1])); }) <
          kTol);
  REQUIRE(oracle::fd_max_rel_error({rnd(3, 4), rnd(5, 4)}, [](Tape<double>& t, const VV& v) {
            return readout(t, ad::matmul_nt(t, v[0], v[1]));
          }) < kTol);
}

TEST_CASE("elementwise and structural gradients") {
  REQUIRE(oracle::fd_max_rel_error({rnd(3, 4), rnd(3, 4)}, [](Tape<double>& t, const VV& v) {
            return readout(t, ad::add(t, v[0], v[1]));
          }) < kTol);
  REQUIRE(oracle::fd_max_rel_error({rnd(3, 4), rnd(1, 4)}, [](Tape<double>& t, const VV& v) {
            return readout(t, ad::add_row(t, v[0], v[1]));
          }) < kTol);
  REQUIRE(oracle::fd_max_rel_error({rnd(3, 4), rnd(3, 4), rnd(3, 4)}, [](Tape<double>& t, const VV& v) {
            return readout(t, ad::add_n(t, std::span<const Var>(v)));
          }) < kTol);
  REQUIRE(oracle::fd_max_rel_error({rnd(3, 4)}, [](Tape<double>& t, const VV& v) {
            return readout(t, ad::scale(t, v[0], 1.7));
          }) < kTol);
  REQUIRE(oracle::fd_max_rel_error({rnd(3, 4), rnd(1, 1)}, [](Tape<double>& t, const VV& v) {
            return readout(t, ad::mul_scalar(t, v[0], v[1]));
          }) < kTol);
  REQUIRE(oracle::fd_max_rel_error({rnd(3, 4)}, [](Tape<double>& t, const VV& v) { return readout(t, ad::gelu(t, v[0])); }) <
          kTol);
  REQUIRE(oracle::fd_max_rel_error({rnd(3, 4)}, [](Tape<double>& t, const VV& v) { return readout(t, ad::sigmoid(t, v[0])); }) <
          kTol);
  REQUIRE(oracle::fd_max_rel_error({rnd(5, 4)}, [](Tape<double>& t, const VV& v) {
            return readout(t, ad::vstack(t, std::span<const Var>(VV{ad::slice_rows(t, v[0], 3, 2), ad::slice_rows(t, v[0], 0, 2)})));
          }) < kTol);
  REQUIRE(oracle::fd_max_rel_error({rnd(3, 5), rnd(3, 2)}, [](Tape<double>& t, const VV& v) {
            return readout(t, ad::hstack(t, std::span<const Var>(VV{ad::slice_cols(t, v[0], 1, 3), v[1]})));
          }) < kTol);
  REQUIRE(oracle::fd_max_rel_error({rnd(4, 3)}, [](Tape<double>& t, const VV& v) {
            return readout(t, ad::mean_rows(t, v[0]));
          }) < kTol);
  REQUIRE(oracle::fd_max_rel_error({rnd(3, 3)}, [](Tape<double>& t, const VV& v) {
            return ad::mul_scalar(t, ad::element(t, v[0], 1, 2), ad::element(t, v[0], 2, 0));
          }) < kTol);
}

TEST_CASE("softmax with and without a mask") {
  REQUIRE(oracle::fd_max_rel_error({rnd(3, 4)}, [](Tape<double>& t, const VV& v) {
            return readout(t, ad::softmax_rows(t, v[0]));
          }) < kTol);
  Matrix<double> mask(3, 4, 0.0);
  mask(0, 1) = mask(2, 3) = mask(2, 0) = -1e9;
  REQUIRE(oracle::fd_max_rel_error({rnd(3, 4)}, [&](Tape<double>& t, const VV& v) {
            return readout(t, ad::softmax_rows(t, v[0], &mask));
          }) < kTol);
  Tape<double> t;
  REQUIRE_THROWS_AS(ad::softmax_rows(t, t.constant(Matrix<double>{{1, 2, 3}}), &mask), ShapeError);
}

TEST_CASE("layer norm gradients and normalisation") {
  REQUIRE(oracle::fd_max_rel_error({rnd(3, 6), rnd(1, 6), rnd(1, 6)}, [](Tape<double>& t, const VV& v) {
            return readout(t, ad::layer_norm(t, v[0], v[1], v[2]));
          }) < kTol);
  Tape<double> t;
  Var y = ad::layer_norm(t, t.constant(rnd(4, 8)), t.constant(Matrix<double>(1, 8, 1.0)),
                         t.constant(Matrix<double>(1, 8)));
  const auto& v = t.value(y);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, q = 0;
    for (double x : v.row(r)) m += x;
    m /= 8;
    for (double x : v.row(r)) q += (x - m) * (x - m);
    REQUIRE(m == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(q / 8 == Catch::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("covariance primitives") {
  REQUIRE(oracle::fd_max_rel_error({rnd(4, 5)}, [](Tape<double>& t, const VV& v) {
            return readout(t, ad::center_rows(t, v[0], 1.0));
          }) < kTol);
  REQUIRE(oracle::fd_max_rel_error({rnd(4, 5)}, [](Tape<double>& t, const VV& v) {
            return readout(t, ad::center_rows(t, v[0], 5.0));
          }) < kTol);
  REQUIRE(oracle::fd_max_rel_error({rnd(4, 4)}, [](Tape<double>& t, const VV& v) {
            return ad::offdiag_sq_sum(t, v[0]);
          }) < kTol);
}

TEST_CASE("losses") {
  Matrix<double> p{{0.2, 0.7, 0.9}};
  REQUIRE(oracle::fd_max_rel_error({p}, [](Tape<double>& t, const VV& v) {
            return ad::bce_mean(t, v[0], {1.0, 0.0, 1.0}, 1e-7);
          }) < kTol);
  Matrix<double> q{{0.2, 0.5, 0.3}};
  REQUIRE(oracle::fd_max_rel_error({q}, [](Tape<double>& t, const VV& v) {
            return ad::cross_entropy(t, v[0], 1, 1e-7);
          }) < kTol);
}

TEST_CASE("parameter leaves accumulate into their sink") {
  ParamStore<double> store;
  store.add("w", Matrix<double>{{1.0, 2.0}});
  Gradients<double> g(store);
  for (int rep = 0; rep < 2; ++rep) {
    Tape<double> t;
    ParamBinder<double> b(t, store, &g);
    Var w = b("w");
    REQUIRE(b("w").id == w.id);  // one leaf per tape
    t.seed(ad::sum(t, ad::scale(t, w, 3.0)), 1.0);
    t.backward();
  }
  REQUIRE(g.used(0));
  REQUIRE(g.grad(0) == Matrix<double>{{6.0, 6.0}});
}

TEST_CASE("constants receive no gradient") {
  Tape<double> t;
  Var c = t.constant(Matrix<double>{{1.0}});
  Var y = ad::scale(t, c, 2.0);
  REQUIRE_FALSE(t.needs_grad(y));
  t.seed(y, 1.0);
  t.backward();
  REQUIRE(t.grad(c).empty());
}
