#include <cmath>

#include "doctest.h"
#include "test_support.hpp"
#include "wsasr/gradcheck.hpp"
#include "wsasr/ops.hpp"
#include "wsasr/optim.hpp"

using namespace wsasr;
using wsasr_test::rand_tensor;

TEST_CASE("matmul basics") {
  Tape<double> tp;
  auto I = tp.leaf(make_matrix<double>(2, 2, {1, 0, 0, 1}));
  auto A = tp.leaf(make_matrix<double>(2, 2, {1, 2, 3, 4}));
  auto B = tp.leaf(make_matrix<double>(2, 2, {5, 6, 7, 8}));

  auto IA = matmul(tp, I, A);
  CHECK(tp.val(IA).data == std::vector<double>{1, 2, 3, 4});

  auto AB = matmul(tp, A, B);
  CHECK(tp.val(AB).data == std::vector<double>{19, 22, 43, 50});

  auto Z = tp.leaf(Tensor<double>::zeros({2, 2}));
  auto ZB = matmul(tp, Z, B);
  for (double v : tp.val(ZB).data) CHECK(v == 0.0);

  auto bad = make_matrix<double>(1, 3, {1, 2, 3});
  auto C = tp.leaf(bad);
  CHECK_THROWS(matmul(tp, A, C));
}

TEST_CASE("softmax rows") {
  Tape<double> tp;
  auto x = tp.leaf(make_matrix<double>(1, 3, {0, 0, 0}));
  auto y = softmax_rows(tp, x);
  for (double v : tp.val(y).data) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-9));

  auto x2 = tp.leaf(make_matrix<double>(1, 2, {0, std::log(2.0)}));
  auto y2 = softmax_rows(tp, x2);
  CHECK(tp.val(y2).at(0, 0) == doctest::Approx(1.0 / 3).epsilon(1e-9));
  CHECK(tp.val(y2).at(0, 1) == doctest::Approx(2.0 / 3).epsilon(1e-9));

  // Large magnitudes must not overflow thanks to per-row max subtraction.
  auto x3 = tp.leaf(make_matrix<double>(1, 2, {1000, 0}));
  auto y3 = softmax_rows(tp, x3);
  CHECK(tp.val(y3).at(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(tp.val(y3).at(0, 1) < 1e-300);

  // Rows sum to one and lie in [0,1] on random input.
  Rng rng(3);
  auto xr = tp.leaf(rand_tensor({20, 7}, rng, -5, 5));
  auto yr = softmax_rows(tp, xr);
  for (int64_t i = 0; i < 20; ++i) {
    double s = 0;
    for (int64_t j = 0; j < 7; ++j) {
      double v = tp.val(yr).at(i, j);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      s += v;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("masked softmax rejects fully masked rows") {
  Tape<double> tp;
  auto x = tp.leaf(make_matrix<double>(2, 2, {1, 2, 3, 4}));
  std::vector<uint8_t> none{0, 0};
  CHECK_THROWS(attention_softmax(tp, x, false, &none));
  std::vector<uint8_t> first{1, 0};
  auto y = attention_softmax(tp, x, false, &first);
  CHECK(tp.val(y).at(0, 0) == 1.0);
  CHECK(tp.val(y).at(0, 1) == 0.0);
}

TEST_CASE("layer norm") {
  Tape<double> tp;
  auto g1 = tp.leaf(Tensor<double>::full({4}, 1.0));
  auto b0 = tp.leaf(Tensor<double>::zeros({4}));

  // Constant row: epsilon keeps it finite, output is zero.
  auto xc = tp.leaf(make_matrix<double>(1, 4, {5, 5, 5, 5}));
  auto yc = layer_norm(tp, xc, g1, b0);
  for (double v : tp.val(yc).data) CHECK(v == doctest::Approx(0.0));

  auto g2 = tp.leaf(Tensor<double>::full({2}, 1.0));
  auto b2 = tp.leaf(Tensor<double>::zeros({2}));
  auto x2 = tp.leaf(make_matrix<double>(1, 2, {1, 3}));
  auto y2 = layer_norm(tp, x2, g2, b2);
  CHECK(tp.val(y2).at(0, 0) == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(tp.val(y2).at(0, 1) == doctest::Approx(1.0).epsilon(1e-4));

  // gain = 0, bias = c -> constant c.
  auto gz = tp.leaf(Tensor<double>::zeros({4}));
  auto bc = tp.leaf(Tensor<double>::full({4}, 2.5));
  auto xr = tp.leaf(make_matrix<double>(1, 4, {0.3, -2, 7, 1}));
  auto yr = layer_norm(tp, xr, gz, bc);
  for (double v : tp.val(yr).data) CHECK(v == doctest::Approx(2.5));

  // Per-row mean ~0, variance ~1 before affine, on non-constant rows.
  Rng rng(5);
  auto xs = tp.leaf(rand_tensor({10, 16}, rng, -3, 3));
  auto g16 = tp.leaf(Tensor<double>::full({16}, 1.0));
  auto b16 = tp.leaf(Tensor<double>::zeros({16}));
  auto ys = layer_norm(tp, xs, g16, b16);
  for (int64_t i = 0; i < 10; ++i) {
    double m = 0, var = 0;
    for (int64_t j = 0; j < 16; ++j) m += tp.val(ys).at(i, j);
    m /= 16;
    for (int64_t j = 0; j < 16; ++j) {
      double c = tp.val(ys).at(i, j) - m;
      var += c * c;
    }
    var /= 16;
    CHECK(std::fabs(m) < 1e-5);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("conv2d same padding") {
  Tape<double> tp;

  // Delta kernel reproduces the input.
  Tensor<double> delta({3, 3, 1, 1});
  delta.data[4] = 1.0;  // center tap
  auto k = tp.leaf(delta);
  auto b = tp.leaf(Tensor<double>::zeros({1}));
  Rng rng(7);
  auto x = tp.leaf(rand_tensor({5, 4, 1}, rng));
  auto y = conv2d_same(tp, x, k, b);
  for (size_t i = 0; i < tp.val(x).data.size(); ++i)
    CHECK(tp.val(y).data[i] == doctest::Approx(tp.val(x).data[i]));

  // All-ones kernel over all-ones 5x5 input: interior 9, edges 6, corners 4.
  auto ones_k = tp.leaf(Tensor<double>::full({3, 3, 1, 1}, 1.0));
  auto ones_x = tp.leaf(Tensor<double>::full({5, 5, 1}, 1.0));
  auto y2 = conv2d_same(tp, ones_x, ones_k, b);
  CHECK(tp.val(y2).at(2, 2, 0) == 9.0);
  CHECK(tp.val(y2).at(0, 2, 0) == 6.0);
  CHECK(tp.val(y2).at(0, 0, 0) == 4.0);

  auto zero_k = tp.leaf(Tensor<double>::zeros({3, 3, 1, 1}));
  auto y3 = conv2d_same(tp, x, zero_k, b);
  for (double v : tp.val(y3).data) CHECK(v == 0.0);
}

TEST_CASE("maxpool ceil semantics") {
  Tape<double> tp;
  Tensor<double> x({5, 3, 1});
  for (size_t i = 0; i < x.data.size(); ++i) x.data[i] = double(i);
  auto y = maxpool2x2_ceil(tp, tp.leaf(x));
  CHECK(tp.val(y).shape == std::vector<int64_t>{3, 2, 1});
  CHECK(tp.val(y).at(0, 0, 0) == 4.0);   // max of rows 0-1, cols 0-1
  CHECK(tp.val(y).at(2, 1, 0) == 14.0);  // clipped window, single row
}

TEST_CASE("backward basics") {
  // loss = sum(W) -> grad all ones.
  {
    Tape<double> tp;
    Rng rng(11);
    auto W = tp.leaf(rand_tensor({3, 4}, rng));
    auto loss = sum(tp, W);
    tp.backward(loss);
    for (double v : tp.grad(W).data) CHECK(v == 1.0);
  }
  // loss = sum(W x) -> grad W has x broadcast over rows.
  {
    Tape<double> tp;
    Rng rng(12);
    auto W = tp.leaf(rand_tensor({3, 4}, rng));
    auto x = tp.leaf(rand_tensor({4, 1}, rng));
    auto loss = sum(tp, matmul(tp, W, x));
    tp.backward(loss);
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 4; ++j)
        CHECK(tp.grad(W).at(i, j) == doctest::Approx(tp.val(x).data[size_t(j)]));
  }
  // Parameter not reachable from loss keeps a zero gradient.
  {
    Tape<double> tp;
    Rng rng(13);
    auto used = tp.leaf(rand_tensor({2, 2}, rng));
    auto unused = tp.leaf(rand_tensor({2, 2}, rng));
    auto loss = sum(tp, used);
    tp.backward(loss);
    for (double v : tp.grad(unused).data) CHECK(v == 0.0);
  }
  // Non-scalar loss is rejected.
  {
    Tape<double> tp;
    auto W = tp.leaf(Tensor<double>::full({2, 2}, 1.0));
    CHECK_THROWS(tp.backward(W));
  }
}

TEST_CASE("finite difference check") {
  // f(w) = sum(w*w) at w=3: quadratic is exact for central differences.
  NamedTensors<double> p{{"w", Tensor<double>::scalar(3.0)}};
  auto rep = finite_diff_check(p, [](Tape<double>& tp, const std::map<std::string, Value<double>>& v) {
    return sum(tp, mul(tp, v.at("w"), v.at("w")));
  });
  CHECK(rep.max_rel_err < 1e-8);

  // Stochastic graphs (active dropout) are rejected.
  NamedTensors<double> p2{{"w", Tensor<double>::full({4, 4}, 0.5)}};
  CHECK_THROWS(finite_diff_check(p2, [](Tape<double>& tp, const std::map<std::string, Value<double>>& v) {
    tp.training = true;
    return sum(tp, dropout(tp, v.at("w"), 0.5));
  }));
}

TEST_CASE("every primitive passes gradient check over 50 seeds") {
  double worst = 0;
  std::string worst_name;
  for (uint64_t seed = 1; seed <= 50; ++seed) {
    for (const auto& c : wsasr_test::check_all_primitives(seed)) {
      if (c.max_rel_err > worst) {
        worst = c.max_rel_err;
        worst_name = c.name;
      }
    }
  }
  INFO("worst primitive: ", worst_name);
  CHECK(worst < 1e-5);
}

TEST_CASE("scale and clip") {
  // Summed gradient 8 over 4 utterances -> 2 before clipping.
  NamedTensors<double> g{{"w", Tensor<double>::scalar(8.0)}};
  double norm = scale_and_clip(g, 4, 10.0);
  CHECK(g["w"].data[0] == 2.0);
  CHECK(norm == doctest::Approx(2.0));

  // Norm 20 after scaling with clip 10 -> everything halved.
  NamedTensors<double> g2{{"w", make_matrix<double>(1, 2, {12.0, 16.0})}};
  double norm2 = scale_and_clip(g2, 1, 10.0);
  CHECK(norm2 == doctest::Approx(20.0));
  CHECK(g2["w"].data[0] == doctest::Approx(6.0));
  CHECK(g2["w"].data[1] == doctest::Approx(8.0));

  // Norm below clip unchanged.
  NamedTensors<double> g3{{"w", make_matrix<double>(1, 2, {3.0, 4.0})}};
  scale_and_clip(g3, 1, 10.0);
  CHECK(g3["w"].data[0] == 3.0);
  CHECK(g3["w"].data[1] == 4.0);
}

TEST_CASE("adadelta") {
  // Fresh state, scalar gradient 1: closed-form first update.
  NamedTensors<double> p{{"w", Tensor<double>::scalar(0.0)}};
  NamedTensors<double> g{{"w", Tensor<double>::scalar(1.0)}};
  AdaDeltaState<double> st;
  adadelta_step(p, g, st);
  double expected = -std::sqrt(1e-6 / (0.05 + 1e-6));
  CHECK(p["w"].data[0] == doctest::Approx(expected).epsilon(1e-6));
  CHECK(p["w"].data[0] == doctest::Approx(-0.004472).epsilon(1e-3));

  // Second identical step still moves and matches the recurrence.
  double eg2 = 0.05, ed2 = (1 - 0.95) * expected * expected;
  eg2 = 0.95 * eg2 + 0.05;
  double delta2 = -std::sqrt(ed2 + 1e-6) / std::sqrt(eg2 + 1e-6);
  adadelta_step(p, g, st);
  CHECK(std::fabs(p["w"].data[0] - (expected + delta2)) < 1e-12);
  CHECK(std::fabs(delta2) > 0);

  // Zero gradient: no update, accumulators decay.
  NamedTensors<double> p2{{"w", Tensor<double>::scalar(1.0)}};
  NamedTensors<double> g0{{"w", Tensor<double>::scalar(0.0)}};
  AdaDeltaState<double> st2;
  st2.accum_grad_sq["w"] = Tensor<double>::scalar(0.5);
  st2.accum_update_sq["w"] = Tensor<double>::scalar(0.0);
  adadelta_step(p2, g0, st2);
  CHECK(p2["w"].data[0] == 1.0);
  CHECK(st2.accum_grad_sq["w"].data[0] == doctest::Approx(0.475));

  // Bit-for-bit determinism for identical inputs.
  auto run = [] {
    NamedTensors<double> pp{{"w", make_matrix<double>(1, 3, {0.1, -0.2, 0.3})}};
    NamedTensors<double> gg{{"w", make_matrix<double>(1, 3, {0.5, 0.25, -1.0})}};
    AdaDeltaState<double> s;
    for (int i = 0; i < 5; ++i) adadelta_step(pp, gg, s);
    return pp["w"].data;
  };
  CHECK(run() == run());

  // Accumulators stay non-negative.
  for (double v : st.accum_grad_sq["w"].data) CHECK(v >= 0.0);
  for (double v : st.accum_update_sq["w"].data) CHECK(v >= 0.0);
}

TEST_CASE("dropout determinism and statistics") {
  Tape<float> tp;
  tp.training = true;
  tp.dropout_seed = 99;
  Rng rng(1);
  Tensor<float> x = Tensor<float>::full({100, 10}, 1.0f);
  auto xv = tp.leaf(x);
  auto y = dropout(tp, xv, 0.25);
  CHECK(tp.used_dropout());
  double kept = 0;
  for (float v : tp.val(y).data) {
    if (v != 0.0f) {
      CHECK(v == doctest::Approx(1.0f / 0.75f));
      kept += 1;
    }
  }
  CHECK(kept / 1000.0 == doctest::Approx(0.75).epsilon(0.06));

  // Same tape seed -> identical mask; inference mode -> identity.
  Tape<float> tp2;
  tp2.training = true;
  tp2.dropout_seed = 99;
  auto y2 = dropout(tp2, tp2.leaf(x), 0.25);
  CHECK(tp.val(y).data == tp2.val(y2).data);

  Tape<float> tp3;
  tp3.training = false;
  auto y3 = dropout(tp3, tp3.leaf(x), 0.25);
  CHECK(tp3.val(y3).data == x.data);
}

TEST_CASE("non-finite forward value is a hard error") {
  Tape<double> tp;
  auto big = tp.leaf(Tensor<double>::full({1, 2}, 1e308));
  CHECK_THROWS(add(tp, big, big));
}
