#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fwlstm/tape.hpp"
#include "fwlstm/tensor.hpp"

namespace fwlstm {

enum class CellKind { fw_lstm, ln_lstm, fw_rnn };

inline std::string_view cell_kind_name(CellKind k) {
  switch (k) {
    case CellKind::fw_lstm: return "fw_lstm";
    case CellKind::ln_lstm: return "ln_lstm";
    case CellKind::fw_rnn: return "fw_rnn";
  }
  return "unknown";
}

inline CellKind parse_cell_kind(std::string_view s) {
  if (s == "fw_lstm") return CellKind::fw_lstm;
  if (s == "ln_lstm") return CellKind::ln_lstm;
  if (s == "fw_rnn") return CellKind::fw_rnn;
  throw ConfigError("unknown cell kind '" + std::string(s) + "' (expected fw_lstm, ln_lstm or fw_rnn)");
}

inline bool uses_fast_weights(CellKind k) { return k != CellKind::ln_lstm; }

/// Scope of the layer norm over the stacked gate preactivation.
enum class GateNorm { joint, per_gate };

inline std::string_view gate_norm_name(GateNorm g) {
  return g == GateNorm::joint ? "joint" : "per_gate";
}

inline GateNorm parse_gate_norm(std::string_view s) {
  if (s == "joint") return GateNorm::joint;
  if (s == "per_gate") return GateNorm::per_gate;
  throw ConfigError("unknown gate_norm '" + std::string(s) + "' (expected joint or per_gate)");
}

struct FwConfig {
  double lambda = 0.99;
  double eta = 1.0;
  int inner_steps = 1;  // FW-RNN only
  bool fast_weights_enabled = true;
  GateNorm gate_norm = GateNorm::joint;

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    if (!(eta >= 0.0)) throw ConfigError("eta must be >= 0");
    if (inner_steps < 1) throw ConfigError("inner_steps must be >= 1");
  }
};

/// Recurrent state of one sequence. `c` is unused by the FW-RNN.
struct CellState {
  Tensor h;
  Tensor c;
  Tensor A;

  static CellState zeros(std::size_t hidden) {
    return {Tensor(hidden, 1), Tensor(hidden, 1), Tensor(hidden, hidden)};
  }
};

struct FwLstmParams {
  Tensor W_i, W_f, W_o, W_g;
  Tensor U_i, U_f, U_o, U_g;
  Tensor b_i, b_f, b_o, b_g;
  Tensor ln_gate_gain, ln_gate_bias;
  Tensor ln_cell_gain, ln_cell_bias;

  [[nodiscard]] std::size_t hidden() const { return W_i.rows(); }
  [[nodiscard]] std::size_t input() const { return U_i.cols(); }

  /// Visits every parameter in canonical order with its canonical name.
  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f("W_i", self.W_i); f("W_f", self.W_f); f("W_o", self.W_o); f("W_g", self.W_g);
    f("U_i", self.U_i); f("U_f", self.U_f); f("U_o", self.U_o); f("U_g", self.U_g);
    f("b_i", self.b_i); f("b_f", self.b_f); f("b_o", self.b_o); f("b_g", self.b_g);
    f("ln_gate_gain", self.ln_gate_gain); f("ln_gate_bias", self.ln_gate_bias);
    f("ln_cell_gain", self.ln_cell_gain); f("ln_cell_bias", self.ln_cell_bias);
  }

  void validate() const {
    const std::size_t h = hidden();
    const std::size_t d = input();
    auto expect = [](const Tensor& t, Shape s, const char* name) {
      if (t.shape() != s) {
        throw ShapeError(std::string("FwLstmParams.") + name + ": expected " + s.str() +
                         ", got " + t.shape().str());
      }
    };
    for (const Tensor* w : {&W_i, &W_f, &W_o, &W_g}) expect(*w, {h, h}, "W");
    for (const Tensor* u : {&U_i, &U_f, &U_o, &U_g}) expect(*u, {h, d}, "U");
    for (const Tensor* b : {&b_i, &b_f, &b_o, &b_g}) expect(*b, {h, 1}, "b");
    expect(ln_gate_gain, {4 * h, 1}, "ln_gate_gain");
    expect(ln_gate_bias, {4 * h, 1}, "ln_gate_bias");
    expect(ln_cell_gain, {h, 1}, "ln_cell_gain");
    expect(ln_cell_bias, {h, 1}, "ln_cell_bias");
  }
};

struct FwRnnParams {
  Tensor W;  // h x h recurrent
  Tensor C;  // h x d input
  Tensor b;
  Tensor ln_gain, ln_bias;

  [[nodiscard]] std::size_t hidden() const { return W.rows(); }
  [[nodiscard]] std::size_t input() const { return C.cols(); }

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f("W", self.W); f("C", self.C); f("b", self.b);
    f("ln_gain", self.ln_gain); f("ln_bias", self.ln_bias);
  }

  void validate() const {
    const std::size_t h = hidden();
    const std::size_t d = input();
    if (W.shape() != Shape{h, h} || C.shape() != Shape{h, d} || b.shape() != Shape{h, 1} ||
        ln_gain.shape() != Shape{h, 1} || ln_bias.shape() != Shape{h, 1}) {
      throw ShapeError("FwRnnParams: inconsistent shapes for hidden " + std::to_string(h) +
                       ", input " + std::to_string(d));
    }
  }
};

using CellParams = std::variant<FwLstmParams, FwRnnParams>;

// ---------------------------------------------------------------------------
// Tape bindings

/// Recurrent state as tape nodes.
struct StateNodes {
  NodeId h;
  NodeId c;
  NodeId A;
};

inline StateNodes bind_state(Tape& tape, const CellState& s) {
  return {tape.leaf(s.h), tape.leaf(s.c), tape.leaf(s.A)};
}

inline CellState read_state(const Tape& tape, const StateNodes& s) {
  return {tape.value(s.h), tape.value(s.c), tape.value(s.A)};
}

/// FW-LSTM/LN-LSTM parameters bound as leaves, plus the stacked blocks of the
/// joint gate projection.
struct BoundFwLstm {
  std::size_t hidden = 0;
  std::size_t input = 0;
  std::vector<NodeId> leaves;  // canonical order
  NodeId W;                    // 4h x h
  NodeId U;                    // 4h x d
  NodeId b;                    // 4h x 1
  NodeId gate_gain, gate_bias, cell_gain, cell_bias;
};

inline BoundFwLstm bind(Tape& tape, const FwLstmParams& p) {
  p.validate();
  BoundFwLstm out;
  out.hidden = p.hidden();
  out.input = p.input();
  FwLstmParams::visit(p, [&](std::string_view, const Tensor& t) { out.leaves.push_back(tape.leaf(t)); });
  const auto& l = out.leaves;
  out.W = tape.concat_rows({l[0], l[1], l[2], l[3]});
  out.U = tape.concat_rows({l[4], l[5], l[6], l[7]});
  out.b = tape.concat_rows({l[8], l[9], l[10], l[11]});
  out.gate_gain = l[12];
  out.gate_bias = l[13];
  out.cell_gain = l[14];
  out.cell_bias = l[15];
  return out;
}

struct BoundFwRnn {
  std::size_t hidden = 0;
  std::size_t input = 0;
  std::vector<NodeId> leaves;
  NodeId W, C, b, ln_gain, ln_bias;
};

inline BoundFwRnn bind(Tape& tape, const FwRnnParams& p) {
  p.validate();
  BoundFwRnn out;
  out.hidden = p.hidden();
  out.input = p.input();
  FwRnnParams::visit(p, [&](std::string_view, const Tensor& t) { out.leaves.push_back(tape.leaf(t)); });
  out.W = out.leaves[0];
  out.C = out.leaves[1];
  out.b = out.leaves[2];
  out.ln_gain = out.leaves[3];
  out.ln_bias = out.leaves[4];
  return out;
}

/// Optional view of the gate activations of one LSTM step.
struct LstmTrace {
  NodeId i, f, o, g_hat, g;
};

namespace detail {

inline void check_step_inputs(const Tape& tape, const StateNodes& s, NodeId x, std::size_t hidden,
                              std::size_t input, bool needs_cell) {
  auto check = [&](NodeId id, Shape want, const char* name) {
    const Tensor& t = tape.value(id);
    if (t.shape() != want) {
      throw ShapeError(std::string("cell step: ") + name + " has shape " + t.shape().str() +
                       ", expected " + want.str());
    }
    if (!t.all_finite()) throw NonFiniteError(std::string("cell step: non-finite values in ") + name);
  };
  check(s.h, {hidden, 1}, "state.h");
  if (needs_cell) check(s.c, {hidden, 1}, "state.c");
  check(s.A, {hidden, hidden}, "state.A");
  check(x, {input, 1}, "x");
}

inline NodeId gate_layer_norm(Tape& tape, const BoundFwLstm& p, NodeId pre, GateNorm mode) {
  if (mode == GateNorm::joint) return tape.layer_norm(pre, p.gate_gain, p.gate_bias);
  const std::size_t h = p.hidden;
  std::vector<NodeId> blocks;
  blocks.reserve(4);
  for (std::size_t k = 0; k < 4; ++k) {
    blocks.push_back(tape.layer_norm(tape.slice_rows(pre, k * h, h),
                                     tape.slice_rows(p.gate_gain, k * h, h),
                                     tape.slice_rows(p.gate_bias, k * h, h)));
  }
  return tape.concat_rows(blocks);
}

/// Shared LSTM body. With `fast_weights` false the A-update and query are
/// skipped entirely and A passes through untouched.
inline StateNodes lstm_body(const BoundFwLstm& p, const FwConfig& cfg, const StateNodes& s,
                            NodeId x, Tape& tape, bool fast_weights, LstmTrace* trace) {
  check_step_inputs(tape, s, x, p.hidden, p.input, true);
  const std::size_t h = p.hidden;
  const NodeId pre = tape.add(tape.add(tape.matvec(p.W, s.h), tape.matvec(p.U, x)), p.b);
  const NodeId gates = gate_layer_norm(tape, p, pre, cfg.gate_norm);
  const NodeId i = tape.sigmoid(tape.slice_rows(gates, 0, h));
  const NodeId f = tape.sigmoid(tape.slice_rows(gates, h, h));
  const NodeId o = tape.sigmoid(tape.slice_rows(gates, 2 * h, h));
  const NodeId g_hat = tape.slice_rows(gates, 3 * h, h);
  const NodeId g = tape.relu(g_hat);
  if (trace) *trace = {i, f, o, g_hat, g};

  NodeId A = s.A;
  NodeId candidate_pre = g_hat;
  if (fast_weights) {
    A = tape.add(tape.scale(s.A, cfg.lambda), tape.scale(tape.outer(g, g), cfg.eta));
    // The query A_t g joins the preactivation g_hat, not g itself.
    candidate_pre = tape.add(g_hat, tape.matvec(A, g));
  }
  const NodeId candidate = tape.relu(candidate_pre);
  const NodeId c_pre = tape.add(tape.hadamard(f, s.c), tape.hadamard(i, candidate));
  const NodeId c = tape.layer_norm(c_pre, p.cell_gain, p.cell_bias);
  const NodeId h_out = tape.hadamard(o, tape.relu(c));
  return {h_out, c, A};
}

}  // namespace detail

/// One FW-LSTM step: joint-LN gates, Hebbian fast-weight update, query, LN cell.
inline StateNodes fwlstm_step(const BoundFwLstm& p, const FwConfig& cfg, const StateNodes& s,
                              NodeId x, Tape& tape, LstmTrace* trace = nullptr) {
  cfg.validate();
  return detail::lstm_body(p, cfg, s, x, tape, cfg.fast_weights_enabled, trace);
}

/// LN-LSTM step: the FW-LSTM equations with the fast-weight update and query removed.
inline StateNodes lnlstm_step(const BoundFwLstm& p, const StateNodes& s, NodeId x, Tape& tape,
                              GateNorm gate_norm = GateNorm::joint, LstmTrace* trace = nullptr) {
  FwConfig cfg;
  cfg.gate_norm = gate_norm;
  return detail::lstm_body(p, cfg, s, x, tape, false, trace);
}

/// FW-RNN step with S inner iterations:
///   z = W h + C x + b,  A_t = lambda A + eta h h^T,
///   h0 = relu(LN z),  h_s = relu(LN(z + A_t h_{s-1})).
inline StateNodes fwrnn_step(const BoundFwRnn& p, const FwConfig& cfg, const StateNodes& s,
                             NodeId x, Tape& tape) {
  cfg.validate();
  detail::check_step_inputs(tape, s, x, p.hidden, p.input, false);
  const NodeId z = tape.add(tape.add(tape.matvec(p.W, s.h), tape.matvec(p.C, x)), p.b);
  NodeId A = s.A;
  if (cfg.fast_weights_enabled) {
    A = tape.add(tape.scale(s.A, cfg.lambda), tape.scale(tape.outer(s.h, s.h), cfg.eta));
  }
  NodeId hs = tape.relu(tape.layer_norm(z, p.ln_gain, p.ln_bias));
  if (cfg.fast_weights_enabled) {
    for (int step = 0; step < cfg.inner_steps; ++step) {
      hs = tape.relu(tape.layer_norm(tape.add(z, tape.matvec(A, hs)), p.ln_gain, p.ln_bias));
    }
  }
  return {hs, s.c, A};
}

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

inline Tensor glorot_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(rows, cols);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

inline void check_sizes(std::size_t hidden, std::size_t input) {
  if (hidden < 2) throw ConfigError("hidden size must be >= 2 (layer norm is degenerate at 1)");
  if (input < 1) throw ConfigError("input size must be >= 1");
}

}  // namespace detail

inline FwLstmParams init_fwlstm(std::size_t hidden, std::size_t input, std::uint64_t seed,
                                double forget_bias = 0.0) {
  detail::check_sizes(hidden, input);
  std::mt19937_64 rng(seed);
  FwLstmParams p;
  for (Tensor* w : {&p.W_i, &p.W_f, &p.W_o, &p.W_g}) *w = detail::glorot_uniform(hidden, hidden, rng);
  for (Tensor* u : {&p.U_i, &p.U_f, &p.U_o, &p.U_g}) *u = detail::glorot_uniform(hidden, input, rng);
  for (Tensor* b : {&p.b_i, &p.b_o, &p.b_g}) *b = Tensor(hidden, 1);
  p.b_f = Tensor(hidden, 1, forget_bias);
  p.ln_gate_gain = Tensor(4 * hidden, 1, 1.0);
  p.ln_gate_bias = Tensor(4 * hidden, 1);
  p.ln_cell_gain = Tensor(hidden, 1, 1.0);
  p.ln_cell_bias = Tensor(hidden, 1);
  return p;
}

inline FwRnnParams init_fwrnn(std::size_t hidden, std::size_t input, std::uint64_t seed) {
  detail::check_sizes(hidden, input);
  std::mt19937_64 rng(seed);
  FwRnnParams p;
  p.W = detail::glorot_uniform(hidden, hidden, rng);
  p.C = detail::glorot_uniform(hidden, input, rng);
  p.b = Tensor(hidden, 1);
  p.ln_gain = Tensor(hidden, 1, 1.0);
  p.ln_bias = Tensor(hidden, 1);
  return p;
}

struct InitializedCell {
  CellParams params;
  CellState state;
};

inline InitializedCell initialize(CellKind kind, std::size_t hidden, std::size_t input,
                                  std::uint64_t seed) {
  if (kind == CellKind::fw_rnn) return {init_fwrnn(hidden, input, seed), CellState::zeros(hidden)};
  return {init_fwlstm(hidden, input, seed), CellState::zeros(hidden)};
}

}  // namespace fwlstm
