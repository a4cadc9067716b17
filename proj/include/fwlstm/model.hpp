#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "fwlstm/cells.hpp"
#include "fwlstm/tape.hpp"
#include "fwlstm/tasks.hpp"

namespace fwlstm {

inline constexpr std::size_t kEmbeddingDim = 100;
inline constexpr std::size_t kReadoutUnits = 100;

/// Embedding -> recurrent cell -> ReLU hidden layer -> 37-way softmax.
struct ModelParams {
  CellKind kind = CellKind::fw_lstm;
  Tensor embedding;            // 37 x 100
  CellParams cell;
  Tensor readout_hidden;       // 100 x h
  Tensor readout_hidden_bias;  // 100 x 1
  Tensor readout_out;          // 37 x 100
  Tensor readout_out_bias;     // 37 x 1

  [[nodiscard]] std::size_t hidden() const {
    return std::visit([](const auto& c) { return c.hidden(); }, cell);
  }

  /// Visits every trainable tensor in canonical order with its checkpoint name.
  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f(std::string("embedding"), self.embedding);
    std::visit(
        [&](auto& cell) {
          using P = std::remove_cvref_t<decltype(cell)>;
          P::visit(cell, [&](std::string_view name, auto& t) { f("cell." + std::string(name), t); });
        },
        self.cell);
    f(std::string("readout_hidden"), self.readout_hidden);
    f(std::string("readout_hidden_bias"), self.readout_hidden_bias);
    f(std::string("readout_out"), self.readout_out);
    f(std::string("readout_out_bias"), self.readout_out_bias);
  }

  [[nodiscard]] std::vector<std::string> names() const {
    std::vector<std::string> out;
    visit(*this, [&](const std::string& n, const Tensor&) { out.push_back(n); });
    return out;
  }

  [[nodiscard]] std::vector<const Tensor*> tensors() const {
    std::vector<const Tensor*> out;
    visit(*this, [&](const std::string&, const Tensor& t) { out.push_back(&t); });
    return out;
  }

  [[nodiscard]] std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    visit(*this, [&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
  }

  void validate() const {
    const std::size_t h = hidden();
    const bool lstm_params = std::holds_alternative<FwLstmParams>(cell);
    if (lstm_params == (kind == CellKind::fw_rnn)) {
      throw ShapeError("ModelParams: cell parameters do not match cell kind " +
                       std::string(cell_kind_name(kind)));
    }
    std::visit([](const auto& c) { c.validate(); }, cell);
    const std::size_t d = std::visit([](const auto& c) { return c.input(); }, cell);
    if (d != kEmbeddingDim) throw ShapeError("ModelParams: cell input size must be 100");
    auto expect = [](const Tensor& t, Shape s, const char* name) {
      if (t.shape() != s) {
        throw ShapeError(std::string("ModelParams.") + name + ": expected " + s.str() + ", got " +
                         t.shape().str());
      }
    };
    expect(embedding, {Vocabulary::kSize, kEmbeddingDim}, "embedding");
    expect(readout_hidden, {kReadoutUnits, h}, "readout_hidden");
    expect(readout_hidden_bias, {kReadoutUnits, 1}, "readout_hidden_bias");
    expect(readout_out, {Vocabulary::kSize, kReadoutUnits}, "readout_out");
    expect(readout_out_bias, {Vocabulary::kSize, 1}, "readout_out_bias");
  }
};

/// Number of trainable scalars, layer-norm gains and biases included.
inline std::size_t count_params(const ModelParams& p) {
  std::size_t n = 0;
  ModelParams::visit(p, [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

inline ModelParams init_model(CellKind kind, std::size_t hidden, std::uint64_t seed,
                              double forget_bias = 0.0) {
  ModelParams p;
  p.kind = kind;
  std::mt19937_64 emb_rng(derive_seed(seed, "init:embedding"));
  p.embedding = detail::glorot_uniform(Vocabulary::kSize, kEmbeddingDim, emb_rng);
  const std::uint64_t cell_seed = derive_seed(seed, "init:cell");
  if (kind == CellKind::fw_rnn) {
    p.cell = init_fwrnn(hidden, kEmbeddingDim, cell_seed);
  } else {
    p.cell = init_fwlstm(hidden, kEmbeddingDim, cell_seed, forget_bias);
  }
  std::mt19937_64 head_rng(derive_seed(seed, "init:readout"));
  p.readout_hidden = detail::glorot_uniform(kReadoutUnits, hidden, head_rng);
  p.readout_hidden_bias = Tensor(kReadoutUnits, 1);
  p.readout_out = detail::glorot_uniform(Vocabulary::kSize, kReadoutUnits, head_rng);
  p.readout_out_bias = Tensor(Vocabulary::kSize, 1);
  return p;
}

struct Prediction {
  Tensor logits;
  Tensor probabilities;
  std::size_t argmax = 0;

  [[nodiscard]] char argmax_symbol() const { return Vocabulary::symbol(argmax); }
};

inline std::size_t argmax_index(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.size(); ++i)
    if (t[i] > t[best]) best = i;
  return best;
}

struct BoundModel {
  CellKind kind = CellKind::fw_lstm;
  std::vector<NodeId> leaves;  // canonical order, matches ModelParams::visit
  NodeId embedding;
  std::variant<BoundFwLstm, BoundFwRnn> cell;
  NodeId readout_hidden, readout_hidden_bias, readout_out, readout_out_bias;
};

inline BoundModel bind(Tape& tape, const ModelParams& p) {
  p.validate();
  BoundModel b;
  b.kind = p.kind;
  b.embedding = tape.leaf(p.embedding);
  b.leaves.push_back(b.embedding);
  std::visit(
      [&](const auto& cell) {
        auto bound = bind(tape, cell);
        b.leaves.insert(b.leaves.end(), bound.leaves.begin(), bound.leaves.end());
        b.cell = std::move(bound);
      },
      p.cell);
  b.readout_hidden = tape.leaf(p.readout_hidden);
  b.readout_hidden_bias = tape.leaf(p.readout_hidden_bias);
  b.readout_out = tape.leaf(p.readout_out);
  b.readout_out_bias = tape.leaf(p.readout_out_bias);
  for (NodeId id : {b.readout_hidden, b.readout_hidden_bias, b.readout_out, b.readout_out_bias}) {
    b.leaves.push_back(id);
  }
  return b;
}

struct SequenceOutput {
  NodeId loss;
  NodeId final_hidden;
  Prediction prediction;
};

/// Runs the cell over the whole sequence from a zero state and scores the
/// final hidden state against `target` (loss at the last step only).
inline SequenceOutput forward_sequence(const BoundModel& m, const FwConfig& cfg,
                                       std::span<const std::size_t> indices, std::size_t target,
                                       Tape& tape) {
  if (indices.empty()) throw ConfigError("forward_sequence: empty input sequence");
  if (target >= Vocabulary::kSize) {
    throw ConfigError("forward_sequence: target index " + std::to_string(target) + " out of range");
  }
  const std::size_t h = std::visit([](const auto& c) { return c.hidden; }, m.cell);
  StateNodes state = bind_state(tape, CellState::zeros(h));
  for (std::size_t t = 0; t < indices.size(); ++t) {
    if (indices[t] >= Vocabulary::kSize) {
      throw ConfigError("forward_sequence: index " + std::to_string(indices[t]) +
                        " at position " + std::to_string(t) + " out of vocabulary range");
    }
    const NodeId x = tape.transpose(tape.slice_rows(m.embedding, indices[t], 1));
    if (m.kind == CellKind::fw_rnn) {
      state = fwrnn_step(std::get<BoundFwRnn>(m.cell), cfg, state, x, tape);
    } else if (m.kind == CellKind::ln_lstm) {
      state = lnlstm_step(std::get<BoundFwLstm>(m.cell), state, x, tape, cfg.gate_norm);
    } else {
      state = fwlstm_step(std::get<BoundFwLstm>(m.cell), cfg, state, x, tape);
    }
  }
  const NodeId hidden =
      tape.relu(tape.add(tape.matvec(m.readout_hidden, state.h), m.readout_hidden_bias));
  const NodeId logits = tape.add(tape.matvec(m.readout_out, hidden), m.readout_out_bias);
  const NodeId loss = tape.softmax_cross_entropy(logits, target);

  SequenceOutput out{loss, state.h, {}};
  out.prediction.logits = tape.value(logits);
  out.prediction.probabilities = tape.saved(loss);
  out.prediction.argmax = argmax_index(out.prediction.logits);
  return out;
}

inline SequenceOutput forward_sequence(const ModelParams& p, const FwConfig& cfg,
                                       std::span<const std::size_t> indices, std::size_t target,
                                       Tape& tape) {
  return forward_sequence(bind(tape, p), cfg, indices, target, tape);
}

/// Loss and gradients for one sequence, gradients in canonical parameter order.
struct SequenceGradients {
  double loss = 0.0;
  std::size_t predicted = 0;
  std::vector<Tensor> grads;
};

inline SequenceGradients sequence_gradients(const ModelParams& p, const FwConfig& cfg,
                                            const EncodedExample& ex) {
  Tape tape;
  const BoundModel m = bind(tape, p);
  const SequenceOutput out = forward_sequence(m, cfg, ex.indices, ex.target, tape);
  SequenceGradients sg;
  sg.loss = tape.value(out.loss).item();
  sg.predicted = out.prediction.argmax;
  const Gradients grads = tape.backward(out.loss);
  sg.grads.reserve(m.leaves.size());
  for (NodeId id : m.leaves) sg.grads.push_back(grads[id]);
  return sg;
}

}  // namespace fwlstm
