#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rl4rec/error.hpp"
#include "rl4rec/nn/tape.hpp"
#include "rl4rec/nn/tensor.hpp"
#include "rl4rec/rng.hpp"

namespace rl4rec::nn {

/// Binds a parameter to a tape. Gradient-enabled tapes accumulate into the
/// parameter's grad, so they must only be built by the (single) trainer.
inline Var use(Tape& t, const Parameter& p, bool frozen = false) {
  if (frozen || !t.grad_enabled()) return t.frozen(p);
  return t.param(const_cast<Parameter&>(p));
}

inline Tensor uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in,
                           Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t(rows, cols);
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

enum class Activation { Tanh, Relu };

inline Var activate(Var x, Activation a) {
  return a == Activation::Tanh ? tanh(x) : relu(x);
}

struct Linear {
  Parameter weight;  // in x out
  Parameter bias;    // 1 x out

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight(name + ".weight", uniform_init(in, out, in, rng)),
        bias(name + ".bias", Tensor(1, out)) {}

  std::size_t in_dim() const { return weight.value.rows(); }
  std::size_t out_dim() const { return weight.value.cols(); }

  /// `frozen` reads the parameters without routing gradients into them.
  Var operator()(Tape& t, Var x, bool frozen = false) const {
    return add(matmul(x, use(t, weight, frozen)), use(t, bias, frozen));
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

/// Fully connected stack; the activation is applied between layers, never
/// after the last one.
struct Mlp {
  std::vector<Linear> layers;
  Activation activation = Activation::Tanh;

  Mlp() = default;
  Mlp(const std::string& name, std::vector<std::size_t> dims, Rng& rng,
      Activation act = Activation::Tanh)
      : activation(act) {
    RL4REC_EXPECT(dims.size() >= 2, "Mlp needs at least input and output dims");
    for (std::size_t i = 0; i + 1 < dims.size(); ++i)
      layers.emplace_back(name + ".l" + std::to_string(i), dims[i], dims[i + 1], rng);
  }

  std::size_t out_dim() const { return layers.back().out_dim(); }

  bool empty() const { return layers.empty(); }

  Var operator()(Tape& t, Var x, bool frozen = false) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](t, x, frozen);
      if (i + 1 < layers.size()) x = activate(x, activation);
    }
    return x;
  }

  void collect(std::vector<Parameter*>& out) {
    for (auto& l : layers) l.collect(out);
  }
};

/// Gated recurrent unit:
///   z  = sigmoid(x Wz + h Uz + bz)
///   r  = sigmoid(x Wr + h Ur + br)
///   n  = tanh(x Wn + (r * h) Un + bn)
///   h' = (1 - z) * n + z * h
struct GruCell {
  Parameter wz, wr, wn;  // in x hidden
  Parameter uz, ur, un;  // hidden x hidden
  Parameter bz, br, bn;  // 1 x hidden

  GruCell() = default;
  GruCell(const std::string& name, std::size_t in, std::size_t hidden, Rng& rng)
      : wz(name + ".wz", uniform_init(in, hidden, in, rng)),
        wr(name + ".wr", uniform_init(in, hidden, in, rng)),
        wn(name + ".wn", uniform_init(in, hidden, in, rng)),
        uz(name + ".uz", uniform_init(hidden, hidden, hidden, rng)),
        ur(name + ".ur", uniform_init(hidden, hidden, hidden, rng)),
        un(name + ".un", uniform_init(hidden, hidden, hidden, rng)),
        bz(name + ".bz", Tensor(1, hidden)),
        br(name + ".br", Tensor(1, hidden)),
        bn(name + ".bn", Tensor(1, hidden)) {}

  std::size_t in_dim() const { return wz.value.rows(); }
  std::size_t hidden_dim() const { return uz.value.rows(); }

  /// x: B x in, h: B x hidden.
  Var operator()(Tape& t, Var x, Var h) const {
    if (x.cols() != in_dim() || h.cols() != hidden_dim() || x.rows() != h.rows()) {
      throw ContractViolation("gru_cell: input " + x.value().shape_string() +
                              " / hidden " + h.value().shape_string() +
                              " do not match parameters");
    }
    Var z = sigmoid(matmul(x, use(t, wz)) + matmul(h, use(t, uz)) + use(t, bz));
    Var r = sigmoid(matmul(x, use(t, wr)) + matmul(h, use(t, ur)) + use(t, br));
    Var n = tanh(matmul(x, use(t, wn)) + matmul(r * h, use(t, un)) + use(t, bn));
    return affine(z, -1.0, 1.0) * n + z * h;
  }

  void collect(std::vector<Parameter*>& out) {
    for (Parameter* p : {&wz, &wr, &wn, &uz, &ur, &un, &bz, &br, &bn}) out.push_back(p);
  }
};

}  // namespace rl4rec::nn
