#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "splittrain/ops.hpp"
#include "splittrain/tensor.hpp"

using namespace splittrain;

namespace {

// Drives an op through a random-target MSE so every output coordinate
// carries a distinct upstream gradient, then compares input gradients with
// central differences.
template <typename Build>
double gradient_error(Tensor64& leaf, Build build, std::mt19937_64& gen) {
  auto probe = build();
  const auto target_values = oracle::random_values<double>(probe.numel(), gen);
  const Tensor64 target(probe.shape(), target_values);
  leaf.zero_grad();
  auto loss = ops::mse_loss(build(), target);
  backward(loss);
  std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
  auto numeric = oracle::central_difference(
      leaf, oracle::all_coords(leaf.numel()), [&] {
        NoGradGuard guard;
        return ops::mse_loss(build(), target).item();
      });
  return oracle::relative_error(analytic, numeric);
}

Tensor64 random_leaf(Shape shape, std::mt19937_64& gen) {
  const auto n = shape_numel(shape);
  return Tensor64(std::move(shape), oracle::random_values<double>(n, gen), true);
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("tensor construction enforces element count") {
  CHECK_THROWS_AS(Tensor(Shape{2, 3}, std::vector<float>(5)), ShapeError);
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("conv2d scalar kernel") {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor w = Tensor::full({1, 1, 1, 1}, 2.0f);
  Tensor b = Tensor::zeros({1});
  auto y = ops::conv2d(x, w, b, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  for (float v : y.data()) CHECK(v == 2.0f);
}

TEST_CASE("conv2d identity-centre kernel reproduces input") {
  std::mt19937_64 gen(3);
  Tensor x({1, 1, 5, 4}, oracle::random_values<float>(20, gen));
  std::vector<float> k(9, 0.0f);
  k[4] = 1.0f;
  auto y = ops::conv2d(x, Tensor({1, 1, 3, 3}, k), Tensor::zeros({1}), 1, 1);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("conv2d matches direct-loop oracle") {
  std::mt19937_64 gen(11);
  const std::size_t N = 2, C = 3, H = 8, W = 8, F = 4;
  auto xv = oracle::random_values<float>(N * C * H * W, gen);
  auto wv = oracle::random_values<float>(F * C * 9, gen);
  auto bv = oracle::random_values<float>(F, gen);
  auto y = ops::conv2d(Tensor({N, C, H, W}, xv), Tensor({F, C, 3, 3}, wv),
                       Tensor({F}, bv), 1, 1);
  auto ref = oracle::conv2d(xv, N, C, H, W, wv, F, 3, 3, bv, 1, 1);
  REQUIRE(y.numel() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.at(i) - ref[i]) < 1e-5);
}

TEST_CASE("conv2d shape errors") {
  Tensor x = Tensor::zeros({1, 2, 4, 4});
  SUBCASE("channel mismatch names both sides") {
    try {
      ops::conv2d(x, Tensor::zeros({1, 3, 3, 3}), Tensor::zeros({1}), 1, 1);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("C=2") != std::string::npos);
      CHECK(msg.find("C=3") != std::string::npos);
    }
  }
  SUBCASE("even kernel") {
    CHECK_THROWS_AS(ops::conv2d(x, Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1}), 1, 0),
                    ShapeError);
  }
  SUBCASE("non-integral output") {
    CHECK_THROWS_AS(ops::conv2d(x, Tensor::zeros({1, 2, 3, 3}), Tensor::zeros({1}), 2, 1),
                    ShapeError);
  }
  SUBCASE("input smaller than kernel") {
    CHECK_THROWS_AS(ops::conv2d(Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1, 2, 5, 5}),
                                Tensor::zeros({1}), 1, 0),
                    ShapeError);
  }
}

TEST_CASE("relu forward and gradient") {
  Tensor x({3}, {-1.0f, 0.0f, 2.0f}, true);
  auto y = ops::relu(x);
  CHECK(y.at(0) == 0.0f);
  CHECK(y.at(1) == 0.0f);
  CHECK(y.at(2) == 2.0f);

  Tensor neg({4}, {-1.0f, -2.0f, -0.5f, -3.0f}, true);
  auto loss = ops::sum(ops::relu(neg));
  CHECK(loss.item() == 0.0f);
  backward(loss);
  for (float g : neg.grad()) CHECK(g == 0.0f);

  std::mt19937_64 gen(5);
  auto v = oracle::random_values<float>(64, gen);
  auto r = ops::relu(Tensor({64}, v));
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(r.at(i) == std::max(v[i], 0.0f));
}

TEST_CASE("maxpool2 forward, tie-break and oracle") {
  auto single = ops::maxpool2(Tensor({1, 1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f}));
  CHECK(single.item() == 4.0f);

  Tensor c = Tensor::full({1, 1, 4, 4}, 7.0f, true);
  auto pooled = ops::maxpool2(c);
  for (float v : pooled.data()) CHECK(v == 7.0f);
  backward(ops::sum(pooled));
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      CHECK(c.grad()[y * 4 + x] == ((y % 2 == 0 && x % 2 == 0) ? 1.0f : 0.0f));

  std::mt19937_64 gen(17);
  auto v = oracle::random_values<float>(36, gen);
  auto p = ops::maxpool2(Tensor({1, 1, 6, 6}, v));
  REQUIRE(p.shape() == Shape{1, 1, 3, 3});
  for (std::size_t oy = 0; oy < 3; ++oy)
    for (std::size_t ox = 0; ox < 3; ++ox) {
      float m = -1e30f;
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) m = std::max(m, v[(2 * oy + i) * 6 + 2 * ox + j]);
      CHECK(p.at(oy * 3 + ox) == m);
    }

  CHECK_THROWS_AS(ops::maxpool2(Tensor::zeros({1, 1, 3, 4})), ShapeError);
}

TEST_CASE("batchnorm2d train mode normalizes") {
  std::mt19937_64 gen(21);
  const std::size_t N = 4, C = 3, H = 5, W = 5;
  Tensor x({N, C, H, W}, oracle::random_values<float>(N * C * H * W, gen, -3.0, 5.0));
  std::vector<float> rm(C, 0.0f), rv(C, 1.0f);
  RunningStats<float> stats{rm, rv};
  auto y = ops::batchnorm2d(x, Tensor::full({C}, 1.0f), Tensor::zeros({C}), stats,
                            Mode::train);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0, ss = 0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < H * W; ++i) s += y.at((n * C + c) * H * W + i);
    const double mean = s / (N * H * W);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < H * W; ++i) {
        const double d = y.at((n * C + c) * H * W + i) - mean;
        ss += d * d;
      }
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(ss / (N * H * W) - 1.0) < 1e-4);
    // running stats moved 10% toward the batch statistics
    CHECK(rm[c] != 0.0f);
  }
}

TEST_CASE("batchnorm2d running-stat update and eval mode") {
  Tensor x({2, 1, 1, 2}, {1.0f, 2.0f, 3.0f, 6.0f});
  std::vector<float> rm{0.0f}, rv{1.0f};
  RunningStats<float> stats{rm, rv};
  ops::batchnorm2d(x, Tensor::full({1}, 1.0f), Tensor::zeros({1}), stats, Mode::train);
  // batch mean 3, unbiased variance 14/3
  CHECK(rm[0] == doctest::Approx(0.3).epsilon(1e-6));
  CHECK(rv[0] == doctest::Approx(0.9 + 0.1 * 14.0 / 3.0).epsilon(1e-6));

  std::vector<float> em{1.0f}, ev{4.0f};
  RunningStats<float> eval_stats{em, ev};
  auto y = ops::batchnorm2d(x, Tensor::full({1}, 2.0f), Tensor::full({1}, 0.5f),
                            eval_stats, Mode::eval);
  CHECK(y.at(3) == doctest::Approx(2.0 * (6.0 - 1.0) / std::sqrt(4.0 + 1e-5) + 0.5));
  CHECK(em[0] == 1.0f);
}

TEST_CASE("batchnorm2d gamma zero yields beta") {
  std::mt19937_64 gen(2);
  Tensor x({2, 2, 3, 3}, oracle::random_values<float>(36, gen));
  std::vector<float> rm(2, 0.0f), rv(2, 1.0f);
  RunningStats<float> stats{rm, rv};
  auto y = ops::batchnorm2d(x, Tensor::zeros({2}), Tensor({2}, {0.25f, -1.5f}), stats,
                            Mode::train);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(y.at((n * 2 + 0) * 9 + i) == 0.25f);
      CHECK(y.at((n * 2 + 1) * 9 + i) == -1.5f);
    }
}

TEST_CASE("batchnorm2d degenerate batch") {
  std::vector<float> rm(1, 0.0f), rv(1, 1.0f);
  RunningStats<float> stats{rm, rv};
  CHECK_THROWS_AS(ops::batchnorm2d(Tensor::zeros({1, 1, 1, 1}), Tensor::full({1}, 1.0f),
                                   Tensor::zeros({1}), stats, Mode::train),
                  ShapeError);
  CHECK_NOTHROW(ops::batchnorm2d(Tensor::zeros({1, 1, 1, 1}), Tensor::full({1}, 1.0f),
                                 Tensor::zeros({1}), stats, Mode::eval));
}

TEST_CASE("linear identity, bias broadcast and oracle") {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = ops::linear(x, eye, Tensor::zeros({3}));
  for (std::size_t i = 0; i < 6; ++i) CHECK(y.at(i) == x.at(i));

  auto z = ops::linear(x, Tensor::zeros({2, 3}), Tensor({2}, {0.5f, -2.0f}));
  for (std::size_t n = 0; n < 2; ++n) {
    CHECK(z.at(n * 2) == 0.5f);
    CHECK(z.at(n * 2 + 1) == -2.0f);
  }

  std::mt19937_64 gen(8);
  const std::size_t N = 5, D = 7, O = 4;
  auto xv = oracle::random_values<float>(N * D, gen);
  auto wv = oracle::random_values<float>(O * D, gen);
  auto bv = oracle::random_values<float>(O, gen);
  auto r = ops::linear(Tensor({N, D}, xv), Tensor({O, D}, wv), Tensor({O}, bv));
  auto ref = oracle::matmul_bias(xv, N, D, wv, O, bv);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(r.at(i) - ref[i]) < 1e-5);

  CHECK_THROWS_AS(ops::linear(x, Tensor::zeros({2, 4}), Tensor::zeros({2})), ShapeError);
}

TEST_CASE("softmax cross-entropy analytic cases") {
  std::vector<int> labels{1};
  auto uniform = ops::softmax_cross_entropy(Tensor({1, 3}, {0.3f, 0.3f, 0.3f}), labels);
  CHECK(uniform.item() == doctest::Approx(std::log(3.0)).epsilon(1e-6));

  std::vector<int> zero{0};
  auto saturated = ops::softmax_cross_entropy(Tensor({1, 2}, {20.0f, -20.0f}), zero);
  CHECK(saturated.item() < 1e-8);

  std::vector<int> bad{3};
  CHECK_THROWS_AS(ops::softmax_cross_entropy(Tensor({1, 3}, {0, 0, 0}), bad),
                  std::out_of_range);
  std::vector<int> negative{-1};
  CHECK_THROWS_AS(ops::softmax_cross_entropy(Tensor({1, 3}, {0, 0, 0}), negative),
                  std::out_of_range);
}

TEST_CASE("mse loss cases") {
  std::mt19937_64 gen(4);
  auto av = oracle::random_values<float>(30, gen);
  Tensor a({5, 6}, av);
  CHECK(ops::mse_loss(a, a.clone()).item() == 0.0f);

  std::vector<float> shifted(av);
  for (auto& v : shifted) v += 1.0f;
  CHECK(ops::mse_loss(Tensor({5, 6}, shifted), a).item() == doctest::Approx(1.0).epsilon(1e-6));

  auto bv = oracle::random_values<float>(30, gen);
  double direct = 0.0;
  for (std::size_t i = 0; i < 30; ++i) direct += double(av[i] - bv[i]) * double(av[i] - bv[i]);
  direct /= 30.0;
  CHECK(std::abs(ops::mse_loss(a, Tensor({5, 6}, bv)).item() - direct) < 1e-6);

  CHECK_THROWS_AS(ops::mse_loss(a, Tensor::zeros({6, 5})), ShapeError);
}

TEST_CASE("backward basics") {
  Tensor x({2, 3}, {1, -2, 3, 4, 5, -6}, true);
  backward(ops::sum(x));
  for (float g : x.grad()) CHECK(g == 1.0f);

  Tensor y({4}, {0.5f, 1.0f, -1.0f, 2.0f}, true);
  backward(ops::mse_loss(y, y.detach()));
  for (float g : y.grad()) CHECK(g == 0.0f);
}

TEST_CASE("backward errors") {
  Tensor x({3}, {1, 2, 3}, true);
  CHECK_THROWS_AS(backward(ops::relu(x)), AutogradError);  // non-scalar
  auto loss = ops::sum(x);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), AutogradError);  // consumed
  CHECK_THROWS_AS(backward(Tensor::scalar(1.0f)), AutogradError);  // unrecorded
}

TEST_CASE("tape is topologically ordered and each node runs once") {
  Tensor64 x({3}, {1.0, 2.0, 3.0}, true);
  auto a = ops::relu(x);
  auto b = ops::scale(a, 2.0);
  auto loss = ops::mse_loss(a, b);  // `a` is reachable twice
  auto tape = Tape<double>::record_from(loss);
  const auto& order = tape.order();
  REQUIRE(order.size() == 3);
  CHECK(order[0] == a.impl());
  CHECK(order[1] == b.impl());
  CHECK(order[2] == loss.impl());
  backward(loss);
  // d/dx mean((x - 2x)^2) = 2x/3 for positive x
  CHECK(x.grad()[2] == doctest::Approx(2.0 * 3.0 / 3.0));
}

TEST_CASE("no-grad guard skips recording") {
  Tensor x({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = ops::relu(x);
  CHECK(y.is_leaf());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite-difference oracle per op (64-bit)") {
  std::mt19937_64 gen(1234);

  SUBCASE("conv2d input, weight, bias") {
    auto x = random_leaf({2, 2, 5, 5}, gen);
    auto w = random_leaf({3, 2, 3, 3}, gen);
    auto b = random_leaf({3}, gen);
    auto f = [&] { return ops::conv2d(x, w, b, 1, 1); };
    CHECK(gradient_error(x, f, gen) < 1e-4);
    CHECK(gradient_error(w, f, gen) < 1e-4);
    CHECK(gradient_error(b, f, gen) < 1e-4);
  }
  SUBCASE("conv2d stride 2 no padding") {
    auto x = random_leaf({1, 2, 7, 7}, gen);
    auto w = random_leaf({2, 2, 3, 3}, gen);
    auto b = random_leaf({2}, gen);
    auto f = [&] { return ops::conv2d(x, w, b, 2, 0); };
    CHECK(gradient_error(x, f, gen) < 1e-4);
    CHECK(gradient_error(w, f, gen) < 1e-4);
  }
  SUBCASE("relu") {
    auto x = random_leaf({3, 7}, gen);
    CHECK(gradient_error(x, [&] { return ops::relu(x); }, gen) < 1e-4);
  }
  SUBCASE("maxpool2") {
    auto x = random_leaf({2, 2, 4, 6}, gen);
    CHECK(gradient_error(x, [&] { return ops::maxpool2(x); }, gen) < 1e-4);
  }
  SUBCASE("batchnorm2d train and eval") {
    auto x = random_leaf({3, 2, 3, 3}, gen);
    auto g = random_leaf({2}, gen);
    auto bt = random_leaf({2}, gen);
    std::vector<double> rm(2, 0.1), rv(2, 1.7);
    auto train = [&] {
      std::vector<double> m = rm, v = rv;  // keep running stats fixed across probes
      RunningStats<double> s{m, v};
      return ops::batchnorm2d(x, g, bt, s, Mode::train);
    };
    CHECK(gradient_error(x, train, gen) < 1e-4);
    CHECK(gradient_error(g, train, gen) < 1e-4);
    CHECK(gradient_error(bt, train, gen) < 1e-4);
    auto eval = [&] {
      RunningStats<double> s{rm, rv};
      return ops::batchnorm2d(x, g, bt, s, Mode::eval);
    };
    CHECK(gradient_error(x, eval, gen) < 1e-4);
  }
  SUBCASE("batchnorm2d gradient of sum(output)") {
    // Batch centring makes d sum(y)/dx vanish; both routes must agree on zero.
    auto x = random_leaf({2, 2, 3, 3}, gen);
    auto g = random_leaf({2}, gen);
    auto bt = random_leaf({2}, gen);
    auto f = [&] {
      std::vector<double> m(2, 0.0), v(2, 1.0);
      RunningStats<double> s{m, v};
      return ops::sum(ops::batchnorm2d(x, g, bt, s, Mode::train));
    };
    backward(f());
    auto numeric = oracle::central_difference(x, oracle::all_coords(x.numel()), [&] {
      NoGradGuard guard;
      return f().item();
    });
    for (std::size_t i = 0; i < x.numel(); ++i) {
      CHECK(std::abs(x.grad()[i]) < 1e-9);
      CHECK(std::abs(numeric[i]) < 1e-6);
    }
  }
  SUBCASE("linear") {
    auto x = random_leaf({4, 5}, gen);
    auto w = random_leaf({3, 5}, gen);
    auto b = random_leaf({3}, gen);
    auto f = [&] { return ops::linear(x, w, b); };
    CHECK(gradient_error(x, f, gen) < 1e-4);
    CHECK(gradient_error(w, f, gen) < 1e-4);
    CHECK(gradient_error(b, f, gen) < 1e-4);
  }
  SUBCASE("softmax cross-entropy") {
    auto z = random_leaf({4, 3}, gen);
    std::vector<int> labels{0, 2, 1, 2};
    backward(ops::softmax_cross_entropy(z, labels));
    std::vector<double> analytic(z.grad().begin(), z.grad().end());
    auto numeric = oracle::central_difference(z, oracle::all_coords(z.numel()), [&] {
      return ops::softmax_cross_entropy(z, labels).item();
    });
    CHECK(oracle::relative_error(analytic, numeric) < 1e-4);
  }
  SUBCASE("mse both arguments") {
    auto a = random_leaf({2, 5}, gen);
    auto b = random_leaf({2, 5}, gen);
    backward(ops::mse_loss(a, b));
    std::vector<double> ga(a.grad().begin(), a.grad().end());
    std::vector<double> gb(b.grad().begin(), b.grad().end());
    auto f = [&] { return ops::mse_loss(a, b).item(); };
    CHECK(oracle::relative_error(ga, oracle::central_difference(a, oracle::all_coords(10), f)) < 1e-4);
    CHECK(oracle::relative_error(gb, oracle::central_difference(b, oracle::all_coords(10), f)) < 1e-4);
  }
}

TEST_CASE("backward is linear in the loss scale") {
  std::mt19937_64 gen(99);
  auto xv = oracle::random_values<double>(2 * 2 * 4 * 4, gen);
  auto wv = oracle::random_values<double>(2 * 2 * 9, gen);
  auto lv = oracle::random_values<double>(2 * 8, gen);
  std::vector<int> labels{1, 0};
  auto grads = [&](double alpha) {
    Tensor64 x({2, 2, 4, 4}, xv);
    Tensor64 w({2, 2, 3, 3}, wv, true);
    Tensor64 lw({2, 8}, lv, true);
    auto h = ops::maxpool2(ops::relu(ops::conv2d(x, w, Tensor64::zeros({2}), 1, 1)));
    auto logits = ops::linear(ops::reshape(h, Shape{2, 8}), lw, Tensor64::zeros({2}));
    backward(ops::scale(ops::softmax_cross_entropy(logits, labels), alpha));
    std::vector<double> g(w.grad().begin(), w.grad().end());
    g.insert(g.end(), lw.grad().begin(), lw.grad().end());
    return g;
  };
  const auto g1 = grads(1.0);
  const auto g3 = grads(3.0);
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(std::abs(g3[i] - 3.0 * g1[i]) < 1e-12);
}

TEST_CASE("forward and backward are deterministic") {
  std::mt19937_64 gen(7);
  auto xv = oracle::random_values<float>(2 * 3 * 8 * 8, gen);
  auto wv = oracle::random_values<float>(4 * 3 * 9, gen);
  auto run = [&] {
    Tensor x({2, 3, 8, 8}, xv);
    Tensor w({4, 3, 3, 3}, wv, true);
    auto y = ops::conv2d(x, w, Tensor::zeros({4}), 1, 1);
    auto loss = ops::sum(ops::relu(y));
    backward(loss);
    std::vector<float> out(y.data().begin(), y.data().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("conv2d and linear agree with oracles across random shapes (32-bit)") {
  std::mt19937_64 gen(2024);
  std::uniform_int_distribution<std::size_t> pick_n(1, 4), pick_c(1, 8), pick_hw(3, 16);
  for (int trial = 0; trial < 12; ++trial) {
    const auto N = pick_n(gen), C = pick_c(gen), H = pick_hw(gen), W = pick_hw(gen),
               F = pick_c(gen);
    auto xv = oracle::random_values<float>(N * C * H * W, gen);
    auto wv = oracle::random_values<float>(F * C * 9, gen);
    auto bv = oracle::random_values<float>(F, gen);
    auto y = ops::conv2d(Tensor({N, C, H, W}, xv), Tensor({F, C, 3, 3}, wv),
                         Tensor({F}, bv), 1, 1);
    auto ref = oracle::conv2d(xv, N, C, H, W, wv, F, 3, 3, bv, 1, 1);
    double worst = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i)
      worst = std::max(worst, double(std::abs(y.at(i) - ref[i])));
    CHECK(worst < 1e-5);

    const auto D = C * H;
    auto lx = oracle::random_values<float>(N * D, gen);
    auto lw = oracle::random_values<float>(F * D, gen);
    auto ly = ops::linear(Tensor({N, D}, lx), Tensor({F, D}, lw), Tensor({F}, bv));
    auto lref = oracle::matmul_bias(lx, N, D, lw, F, bv);
    for (std::size_t i = 0; i < lref.size(); ++i) CHECK(std::abs(ly.at(i) - lref[i]) < 1e-5);
  }
}

}  // TEST_SUITE
