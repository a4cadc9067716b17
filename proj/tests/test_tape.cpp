#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "fwlstm/grad_check.hpp"
#include "fwlstm/tape.hpp"

namespace fwlstm {
namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor t(r, c);
  for (double& v : t.data()) v = d(rng);
  return t;
}

TEST(Tape, MatvecValue) {
  Tape tape;
  const NodeId m = tape.leaf(Tensor::matrix({{1, 2}, {3, 4}}));
  const NodeId v = tape.leaf(Tensor::column({1, 1}));
  EXPECT_EQ(tape.value(tape.matvec(m, v)), Tensor::column({3, 7}));
}

TEST(Tape, MatmulValue) {
  Tape tape;
  const NodeId a = tape.leaf(Tensor::matrix({{1, 2}, {3, 4}}));
  const NodeId b = tape.leaf(Tensor::matrix({{0, 1}, {1, 0}}));
  EXPECT_EQ(tape.value(tape.matmul(a, b)), Tensor::matrix({{2, 1}, {4, 3}}));
}

TEST(Tape, LayerNormTwoElements) {
  Tape tape;
  const NodeId x = tape.leaf(Tensor::column({2, 0}));
  const NodeId g = tape.leaf(Tensor::column({1, 1}));
  const NodeId b = tape.leaf(Tensor::column({0, 0}));
  EXPECT_EQ(tape.value(tape.layer_norm(x, g, b, 0.0)), Tensor::column({1, -1}));
}

TEST(Tape, LayerNormConstantInputIsZero) {
  Tape tape;
  const NodeId x = tape.leaf(Tensor::column({3.5, 3.5, 3.5}));
  const NodeId g = tape.leaf(Tensor(3, 1, 1.0));
  const NodeId b = tape.leaf(Tensor(3, 1));
  EXPECT_EQ(tape.value(tape.layer_norm(x, g, b, 1e-5)), Tensor(3, 1));
}

TEST(Tape, LayerNormRejectsLengthOne) {
  Tape tape;
  const NodeId x = tape.leaf(Tensor::column({1.0}));
  const NodeId g = tape.leaf(Tensor::column({1.0}));
  const NodeId b = tape.leaf(Tensor::column({0.0}));
  EXPECT_THROW(tape.layer_norm(x, g, b), ShapeError);
}

TEST(Tape, ReluAndSigmoid) {
  Tape tape;
  const NodeId x = tape.leaf(Tensor::column({-1, 2}));
  EXPECT_EQ(tape.value(tape.relu(x)), Tensor::column({0, 2}));
  const NodeId z = tape.leaf(Tensor::column({0.0}));
  EXPECT_EQ(tape.value(tape.sigmoid(z))[0], 0.5);
}

TEST(Tape, ShapeErrorNamesPrimitiveAndShapes) {
  Tape tape;
  const NodeId a = tape.leaf(Tensor(2, 3));
  const NodeId b = tape.leaf(Tensor(2, 1));
  try {
    tape.matvec(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matvec"), std::string::npos);
    EXPECT_NE(msg.find("(2x3)"), std::string::npos);
    EXPECT_NE(msg.find("(2x1)"), std::string::npos);
  }
  EXPECT_THROW(tape.add(a, b), ShapeError);
  EXPECT_THROW(tape.slice_rows(b, 1, 2), ShapeError);
}

TEST(Tape, CheckFiniteMode) {
  Tape tape(true);
  const NodeId x = tape.leaf(Tensor::column({1e308, 1e308}));
  EXPECT_THROW(tape.scale(x, 10.0), NonFiniteError);
  Tape lax;
  const NodeId y = lax.leaf(Tensor::column({1e308, 1e308}));
  EXPECT_NO_THROW(lax.scale(y, 10.0));
}

TEST(Backward, ReluSubgradient) {
  Tape tape;
  const NodeId x = tape.leaf(Tensor::column({-1, 2}));
  const NodeId loss = tape.sum(tape.relu(x));
  const Gradients g = tape.backward(loss);
  EXPECT_EQ(g[x], Tensor::column({0, 1}));
  EXPECT_EQ(g[loss], Tensor::scalar(1.0));
}

TEST(Backward, ReluAtExactZeroIsZero) {
  Tape tape;
  const NodeId x = tape.leaf(Tensor::column({0.0}));
  const Gradients g = tape.backward(tape.sum(tape.relu(x)));
  EXPECT_EQ(g[x][0], 0.0);
}

TEST(Backward, SigmoidDerivativeAtZero) {
  Tape tape;
  const NodeId w = tape.leaf(Tensor::column({0.0}));
  const NodeId x = tape.leaf(Tensor::column({1.0}));
  const NodeId loss = tape.sum(tape.sigmoid(tape.hadamard(w, x)));
  EXPECT_DOUBLE_EQ(tape.backward(loss)[w][0], 0.25);
}

TEST(Backward, NonScalarLossRejected) {
  Tape tape;
  const NodeId x = tape.leaf(Tensor::column({1, 2}));
  EXPECT_THROW(tape.backward(x), TapeError);
}

TEST(Backward, TwiceWithoutResetRejected) {
  Tape tape;
  const NodeId x = tape.leaf(Tensor::column({1, 2}));
  const NodeId loss = tape.sum(x);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), TapeError);
  tape.reset();
  const NodeId y = tape.leaf(Tensor::column({1, 2}));
  EXPECT_NO_THROW(tape.backward(tape.sum(y)));
}

TEST(Backward, UnreachableNodesHaveZeroGradient) {
  Tape tape;
  const NodeId a = tape.leaf(Tensor::column({1, 2}));
  const NodeId b = tape.leaf(Tensor::column({3, 4}));
  const NodeId dead = tape.sigmoid(tape.hadamard(a, b));
  const NodeId loss = tape.sum(tape.scale(a, 2.0));
  const Gradients g = tape.backward(loss);
  EXPECT_EQ(g[b], Tensor(2, 1));
  EXPECT_EQ(g[dead], Tensor(2, 1));
  EXPECT_EQ(g[a], Tensor::column({2, 2}));
}

TEST(Backward, SharedInputAccumulates) {
  Tape tape;
  const NodeId u = tape.leaf(Tensor::column({1.5, -2.0}));
  // sum(u u^T) = (sum u)^2, gradient 2 sum(u) per element.
  const Gradients g = tape.backward(tape.sum(tape.outer(u, u)));
  EXPECT_DOUBLE_EQ(g[u][0], -1.0);
  EXPECT_DOUBLE_EQ(g[u][1], -1.0);
}

TEST(Backward, SoftmaxCrossEntropyUniform) {
  Tape tape;
  const NodeId z = tape.leaf(Tensor(37, 1));
  const NodeId loss = tape.softmax_cross_entropy(z, 3);
  EXPECT_NEAR(tape.value(loss).item(), std::log(37.0), 1e-14);
  const Gradients g = tape.backward(loss);
  EXPECT_NEAR(g[z][3], 1.0 / 37.0 - 1.0, 1e-15);
  EXPECT_NEAR(g[z][0], 1.0 / 37.0, 1e-15);
}

TEST(Backward, LayerNormMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const Tensor proj = random_tensor(4, 1, rng);
  const TapeFunction f = [&](Tape& t, std::span<const NodeId> p) {
    const NodeId w = t.leaf(proj);
    return t.sum(t.hadamard(w, t.layer_norm(p[0], p[1], p[2])));
  };
  GradCheckOptions opt;
  opt.tol = 1e-6;
  const GradCheckReport r =
      grad_check(f, {random_tensor(4, 1, rng), random_tensor(4, 1, rng), random_tensor(4, 1, rng)}, opt);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

// Every primitive: analytic JVP along a random direction vs a central difference.
struct PrimitiveCase {
  const char* name;
  std::vector<Shape> inputs;
  std::function<NodeId(Tape&, std::span<const NodeId>)> build;
};

std::vector<PrimitiveCase> primitive_cases() {
  return {
      {"matmul", {{3, 4}, {4, 2}}, [](Tape& t, auto p) { return t.matmul(p[0], p[1]); }},
      {"matvec", {{3, 4}, {4, 1}}, [](Tape& t, auto p) { return t.matvec(p[0], p[1]); }},
      {"add", {{3, 2}, {3, 2}}, [](Tape& t, auto p) { return t.add(p[0], p[1]); }},
      {"hadamard", {{3, 2}, {3, 2}}, [](Tape& t, auto p) { return t.hadamard(p[0], p[1]); }},
      {"scalar_scale", {{3, 2}}, [](Tape& t, auto p) { return t.scale(p[0], -1.7); }},
      {"outer_product", {{3, 1}, {4, 1}}, [](Tape& t, auto p) { return t.outer(p[0], p[1]); }},
      {"concat_rows", {{2, 3}, {1, 3}, {3, 3}}, [](Tape& t, auto p) { return t.concat_rows(p); }},
      {"slice_rows", {{5, 2}}, [](Tape& t, auto p) { return t.slice_rows(p[0], 1, 3); }},
      {"transpose", {{2, 3}}, [](Tape& t, auto p) { return t.transpose(p[0]); }},
      {"sigmoid", {{4, 1}}, [](Tape& t, auto p) { return t.sigmoid(p[0]); }},
      {"relu", {{6, 1}}, [](Tape& t, auto p) { return t.relu(p[0]); }},
      {"layer_norm", {{5, 1}, {5, 1}, {5, 1}},
       [](Tape& t, auto p) { return t.layer_norm(p[0], p[1], p[2]); }},
      {"softmax_cross_entropy", {{6, 1}},
       [](Tape& t, auto p) { return t.softmax_cross_entropy(p[0], 2); }},
  };
}

TEST(Backward, EveryPrimitiveJvpMatchesCentralDifferences) {
  for (const PrimitiveCase& pc : primitive_cases()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(1000 + seed);
      // Random projection turns any output into a scalar with a generic gradient.
      Tensor probe;
      {
        Tape shape_tape;
        std::vector<NodeId> ids;
        for (Shape s : pc.inputs) ids.push_back(shape_tape.leaf(Tensor(s.rows, s.cols, 0.5)));
        const Shape out = shape_tape.value(pc.build(shape_tape, ids)).shape();
        probe = random_tensor(out.rows, out.cols, rng);
      }
      const TapeFunction f = [&](Tape& t, std::span<const NodeId> p) {
        const NodeId y = pc.build(t, p);
        return t.sum(t.hadamard(t.leaf(probe), y));
      };
      std::vector<Tensor> params;
      std::vector<Tensor> direction;
      for (Shape s : pc.inputs) {
        params.push_back(random_tensor(s.rows, s.cols, rng));
        direction.push_back(random_tensor(s.rows, s.cols, rng));
      }
      GradCheckOptions opt;
      opt.seed = seed;
      std::vector<KinkPoint> kinks;
      params = detail::kink_free_point(f, params, opt, kinks);
      const DirectionalCheck d = directional_check(f, params, direction, 1e-5);
      EXPECT_LT(d.rel_error, 1e-6) << pc.name << " seed " << seed << " analytic " << d.analytic
                                   << " numeric " << d.numeric;
    }
  }
}

TEST(LayerNorm, StandardizesNonConstantInput) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t n = 2 + seed % 30;
    Tape tape;
    const NodeId x = tape.leaf(random_tensor(n, 1, rng, 3.0));
    const NodeId y = tape.layer_norm(x, tape.leaf(Tensor(n, 1, 1.0)), tape.leaf(Tensor(n, 1)), 0.0);
    double mean = 0.0;
    for (double v : tape.value(y).data()) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : tape.value(y).data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    EXPECT_LT(std::abs(mean), 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-12);
  }
}

TEST(Tape, EvaluationIsDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(5);
    Tape tape;
    const NodeId m = tape.leaf(random_tensor(6, 6, rng));
    const NodeId v = tape.leaf(random_tensor(6, 1, rng));
    const NodeId y = tape.layer_norm(tape.matvec(m, v), tape.leaf(Tensor(6, 1, 1.0)),
                                     tape.leaf(Tensor(6, 1)));
    const NodeId loss = tape.softmax_cross_entropy(tape.sigmoid(y), 1);
    const Gradients g = tape.backward(loss);
    return std::make_pair(tape.value(loss), std::make_pair(g[m], g[v]));
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace fwlstm
