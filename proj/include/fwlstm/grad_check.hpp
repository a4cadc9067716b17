#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "fwlstm/tape.hpp"

namespace fwlstm {

/// Builds a scalar loss on `tape` from parameter leaves bound in the given order.
using TapeFunction = std::function<NodeId(Tape& tape, std::span<const NodeId> params)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tol = 1e-4;
  // Every relu preactivation must satisfy |z| > kink_margin at the evaluation point.
  double kink_margin = 1e-3;
  int max_resamples = 100;
  double resample_scale = 1e-2;
  // Denominator floor of the relative error, so exact-zero gradients compare absolutely.
  double denominator_floor = 1e-5;
  std::uint64_t seed = 0;
};

struct KinkPoint {
  int attempt = 0;
  double margin = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool passed = false;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::vector<KinkPoint> resampled;
  std::vector<Tensor> evaluated_at;
};

class GradCheckError : public Error {
 public:
  using Error::Error;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

struct Evaluation {
  double loss = 0.0;
  double relu_margin = 0.0;
};

inline Evaluation evaluate_loss(const TapeFunction& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<NodeId> ids;
  ids.reserve(params.size());
  for (const Tensor& p : params) ids.push_back(tape.leaf(p));
  const NodeId loss = f(tape, ids);
  return {tape.value(loss).item(), tape.min_relu_margin()};
}

inline std::vector<Tensor> analytic_gradients(const TapeFunction& f,
                                              const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<NodeId> ids;
  ids.reserve(params.size());
  for (const Tensor& p : params) ids.push_back(tape.leaf(p));
  const NodeId loss = f(tape, ids);
  const Gradients grads = tape.backward(loss);
  std::vector<Tensor> out;
  out.reserve(ids.size());
  for (NodeId id : ids) out.push_back(grads[id]);
  return out;
}

/// Moves `params` off ReLU kinks by seeded Gaussian jitter; throws after max_resamples.
inline std::vector<Tensor> kink_free_point(const TapeFunction& f, std::vector<Tensor> params,
                                           const GradCheckOptions& opt,
                                           std::vector<KinkPoint>& resampled) {
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> noise(0.0, opt.resample_scale);
  for (int attempt = 0;; ++attempt) {
    const double margin = evaluate_loss(f, params).relu_margin;
    if (margin > opt.kink_margin) return params;
    if (attempt >= opt.max_resamples) {
      throw GradCheckError("grad_check: evaluation point stays within " +
                           std::to_string(opt.kink_margin) + " of a ReLU kink after " +
                           std::to_string(opt.max_resamples) + " resamples; change the seed");
    }
    resampled.push_back({attempt, margin});
    for (Tensor& p : params)
      for (double& v : p.data()) v += noise(rng);
  }
}

}  // namespace detail

/// Compares reverse-mode gradients against central differences on every
/// parameter element.
inline GradCheckReport grad_check(const TapeFunction& f, std::vector<Tensor> params,
                                  const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  params = detail::kink_free_point(f, std::move(params), opt, report.resampled);
  const std::vector<Tensor> analytic = detail::analytic_gradients(f, params);

  std::vector<Tensor> probe = params;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    for (std::size_t i = 0; i < probe[p].size(); ++i) {
      const double original = probe[p][i];
      probe[p][i] = original + opt.step;
      const double up = detail::evaluate_loss(f, probe).loss;
      probe[p][i] = original - opt.step;
      const double down = detail::evaluate_loss(f, probe).loss;
      probe[p][i] = original;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double err = relative_error(analytic[p][i], numeric, opt.denominator_floor);
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = p;
        report.worst_index = i;
        report.worst_analytic = analytic[p][i];
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error < opt.tol;
  report.evaluated_at = std::move(params);
  return report;
}

struct DirectionalCheck {
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

/// Analytic Jacobian-vector product of the loss along `direction` versus a
/// central difference along the same direction.
inline DirectionalCheck directional_check(const TapeFunction& f, const std::vector<Tensor>& params,
                                          const std::vector<Tensor>& direction, double step,
                                          double denominator_floor = 1e-5) {
  if (direction.size() != params.size()) throw ShapeError("directional_check: arity mismatch");
  const std::vector<Tensor> grads = detail::analytic_gradients(f, params);
  DirectionalCheck out;
  std::vector<Tensor> up = params;
  std::vector<Tensor> down = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (direction[p].shape() != params[p].shape()) {
      throw ShapeError("directional_check: direction shape " + direction[p].shape().str() +
                       " vs parameter " + params[p].shape().str());
    }
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      out.analytic += grads[p][i] * direction[p][i];
      up[p][i] += step * direction[p][i];
      down[p][i] -= step * direction[p][i];
    }
  }
  out.numeric = (detail::evaluate_loss(f, up).loss - detail::evaluate_loss(f, down).loss) /
                (2.0 * step);
  out.rel_error = relative_error(out.analytic, out.numeric, denominator_floor);
  return out;
}

}  // namespace fwlstm
