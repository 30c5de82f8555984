#pragma once

// Linear probe and rectifier MLP with hand-derived gradients, plus seeded
// minibatch gradient descent for the probe.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "oodforge/container.hpp"
#include "oodforge/dataio.hpp"
#include "oodforge/error.hpp"
#include "oodforge/numerics.hpp"
#include "oodforge/random.hpp"

namespace oodforge {

// Affine classifier: logits = W x + b, W is C x F_d.
struct LinearProbe {
  Matrix weight;
  Vector bias;

  std::size_t classes() const noexcept { return weight.rows(); }
  std::size_t input_dim() const noexcept { return weight.cols(); }

  friend bool operator==(const LinearProbe&, const LinearProbe&) = default;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 0.1;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;

  void validate() const {
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train config: weight_decay must be >= 0");
  }
};

inline Vector probe_logits(const LinearProbe& p, std::span<const double> x) {
  if (x.size() != p.input_dim()) {
    throw ConfigError("probe_logits: input has dimension " + std::to_string(x.size()) +
                      ", probe expects " + std::to_string(p.input_dim()));
  }
  Vector z = matvec(p.weight, x);
  for (std::size_t c = 0; c < z.size(); ++c) z[c] += p.bias[c];
  return z;
}

inline Matrix probe_logits(const LinearProbe& p, const Matrix& xs) {
  Matrix out(xs.rows(), p.classes());
  for (std::size_t i = 0; i < xs.rows(); ++i) {
    const Vector z = probe_logits(p, xs.row(i));
    std::copy(z.begin(), z.end(), out.row(i).begin());
  }
  return out;
}

// Uniform initialisation in [-1/sqrt(fan_in), 1/sqrt(fan_in)], weights in
// row-major order followed by the bias.
inline void init_uniform(Matrix& w, Vector& b, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
  for (double& v : w.data()) v = rng.uniform(-bound, bound);
  for (double& v : b) v = rng.uniform(-bound, bound);
}

inline LinearProbe make_probe(std::size_t classes, std::size_t input_dim, std::uint64_t seed) {
  LinearProbe p{Matrix(classes, input_dim), Vector(classes, 0.0)};
  Rng rng(seed);
  init_uniform(p.weight, p.bias, rng);
  return p;
}

struct ProbeGrads {
  Matrix weight;
  Vector bias;
};

struct ProbeLoss {
  double loss = 0.0;
  ProbeGrads grads;
};

// Mean softmax cross-entropy over the selected rows plus (decay/2)|W|^2.
//   dL/dW = (1/N) sum_i (softmax(z_i) - e_{y_i}) x_i^T + decay W
//   dL/db = (1/N) sum_i (softmax(z_i) - e_{y_i})
inline ProbeLoss cross_entropy_grad(const LinearProbe& p, const Matrix& xs, const Labels& ys,
                                    std::span<const std::size_t> rows, double weight_decay = 0.0) {
  const std::size_t classes = p.classes();
  ProbeLoss out{0.0, {Matrix(classes, p.input_dim()), Vector(classes, 0.0)}};
  if (rows.empty()) throw ConfigError("cross_entropy_grad: empty batch");
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  for (std::size_t i : rows) {
    const auto x = xs.row(i);
    const Vector z = probe_logits(p, x);
    const auto y = static_cast<std::size_t>(ys[i]);
    if (y >= classes) throw ConfigError("cross_entropy_grad: label out of range");
    const double lse = logsumexp(z);
    out.loss += (lse - z[y]) * inv_n;
    for (std::size_t c = 0; c < classes; ++c) {
      const double delta = (std::exp(z[c] - lse) - (c == y ? 1.0 : 0.0)) * inv_n;
      out.grads.bias[c] += delta;
      auto gw = out.grads.weight.row(c);
      for (std::size_t k = 0; k < x.size(); ++k) gw[k] += delta * x[k];
    }
  }
  if (weight_decay > 0.0) {
    double sq = 0.0;
    const auto w = p.weight.data();
    auto gw = out.grads.weight.data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      sq += w[k] * w[k];
      gw[k] += weight_decay * w[k];
    }
    out.loss += 0.5 * weight_decay * sq;
  }
  return out;
}

inline ProbeLoss cross_entropy_grad(const LinearProbe& p, const LabeledEmbeddings& batch,
                                    double weight_decay = 0.0) {
  const auto& ys = batch.require_labels("cross_entropy_grad");
  std::vector<std::size_t> rows(batch.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return cross_entropy_grad(p, batch.features, ys, rows, weight_decay);
}

struct ProbeTrainResult {
  LinearProbe probe;
  std::vector<double> epoch_loss;
};

using FeatureFn = std::function<Vector(std::span<const double>)>;

// Seeded minibatch gradient descent. The RNG stream (cfg.seed) first
// initialises the probe, then yields one Fisher-Yates permutation per epoch.
// Features are consumed as given (apply normalisation through `features`).
inline ProbeTrainResult train_probe(const LabeledEmbeddings& data, const TrainConfig& cfg,
                                    const FeatureFn& features = {}, std::size_t classes = 0) {
  cfg.validate();
  const auto& ys = data.require_labels("train_probe");
  const LabeledEmbeddings mapped = features ? map_rows(data, features) : data;
  const std::size_t c = std::max(classes, data.num_classes());
  const auto counts = class_counts(ys, c);
  const auto present = std::count_if(counts.begin(), counts.end(), [](auto n) { return n > 0; });
  if (present < 2) throw ConfigError("train_probe: training data contains a single class");

  Rng rng(cfg.seed);
  ProbeTrainResult result{{Matrix(c, mapped.dim()), Vector(c, 0.0)}, {}};
  init_uniform(result.probe.weight, result.probe.bias, rng);

  std::vector<std::size_t> order(mapped.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, stop - start);
      const ProbeLoss step =
          cross_entropy_grad(result.probe, mapped.features, ys, batch, cfg.weight_decay);
      total += step.loss * static_cast<double>(batch.size());
      auto w = result.probe.weight.data();
      const auto gw = step.grads.weight.data();
      for (std::size_t k = 0; k < w.size(); ++k) w[k] -= cfg.learning_rate * gw[k];
      for (std::size_t k = 0; k < c; ++k) result.probe.bias[k] -= cfg.learning_rate * step.grads.bias[k];
    }
    result.epoch_loss.push_back(total / static_cast<double>(order.size()));
  }
  for (double v : result.probe.weight.data())
    if (!std::isfinite(v)) throw NumericalError("train_probe: parameters diverged");
  return result;
}

inline double probe_accuracy(const LinearProbe& p, const LabeledEmbeddings& data) {
  const auto& ys = data.require_labels("probe_accuracy");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (argmax(probe_logits(p, data.features.row(i))) == static_cast<std::size_t>(ys[i])) {
      ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// MLP with rectifier hidden activations and a linear output layer.

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct Mlp {
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const { return layers.front().weight.cols(); }
  std::size_t output_dim() const { return layers.back().weight.rows(); }

  void validate() const {
    if (layers.empty()) throw ConfigError("Mlp: needs at least one layer");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].bias.size() != layers[l].weight.rows()) {
        throw ConfigError("Mlp: bias length mismatch in layer " + std::to_string(l));
      }
      if (l > 0 && layers[l].weight.cols() != layers[l - 1].weight.rows()) {
        throw ConfigError("Mlp: layer " + std::to_string(l) + " does not chain");
      }
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.data().size() + l.bias.size();
    return n;
  }

  friend bool operator==(const Mlp&, const Mlp&) = default;
};

// dims = {in, hidden..., out}
inline Mlp make_mlp(std::span<const std::size_t> dims, std::uint64_t seed) {
  if (dims.size() < 2) throw ConfigError("make_mlp: need at least input and output dims");
  Rng rng(seed);
  Mlp m;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    DenseLayer layer{Matrix(dims[l + 1], dims[l]), Vector(dims[l + 1], 0.0)};
    init_uniform(layer.weight, layer.bias, rng);
    m.layers.push_back(std::move(layer));
  }
  return m;
}

inline Mlp identity_mlp(std::size_t dim) {
  return Mlp{{DenseLayer{Matrix::identity(dim), Vector(dim, 0.0)}}};
}

struct MlpTape {
  std::vector<Vector> inputs;          // input of each layer
  std::vector<Vector> pre_activations; // W x + b of each layer
};

struct MlpOutput {
  Vector output;
  MlpTape tape;
};

inline MlpOutput mlp_forward(const Mlp& m, std::span<const double> x) {
  if (m.layers.empty()) throw ConfigError("mlp_forward: empty network");
  if (x.size() != m.input_dim()) {
    throw ConfigError("mlp_forward: input has dimension " + std::to_string(x.size()) +
                      ", network expects " + std::to_string(m.input_dim()));
  }
  MlpOutput out;
  Vector h(x.begin(), x.end());
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& layer = m.layers[l];
    Vector z = matvec(layer.weight, h);
    for (std::size_t k = 0; k < z.size(); ++k) z[k] += layer.bias[k];
    out.tape.inputs.push_back(std::move(h));
    h = z;
    if (l + 1 < m.layers.size())
      for (double& v : h) v = v > 0.0 ? v : 0.0;
    out.tape.pre_activations.push_back(std::move(z));
  }
  out.output = std::move(h);
  return out;
}

struct MlpGrads {
  std::vector<DenseLayer> layers;
  Vector input;
};

// Reverse-mode derivative of out_grad . mlp(x) with respect to every
// parameter and to x. The rectifier's derivative at exactly 0 is taken as 0.
inline MlpGrads mlp_backward(const Mlp& m, const MlpTape& tape, std::span<const double> out_grad) {
  if (tape.inputs.size() != m.layers.size() || tape.pre_activations.size() != m.layers.size()) {
    throw ConfigError("mlp_backward: tape does not match network depth");
  }
  if (out_grad.size() != m.output_dim()) throw ConfigError("mlp_backward: out_grad dimension");
  MlpGrads g;
  g.layers.resize(m.layers.size());
  Vector delta(out_grad.begin(), out_grad.end());
  for (std::size_t l = m.layers.size(); l-- > 0;) {
    const auto& layer = m.layers[l];
    const auto& in = tape.inputs[l];
    if (in.size() != layer.weight.cols() || tape.pre_activations[l].size() != layer.weight.rows()) {
      throw ConfigError("mlp_backward: stale tape at layer " + std::to_string(l));
    }
    if (l + 1 < m.layers.size()) {
      const auto& z = tape.pre_activations[l];
      for (std::size_t k = 0; k < delta.size(); ++k)
        if (!(z[k] > 0.0)) delta[k] = 0.0;
    }
    DenseLayer& gl = g.layers[l];
    gl.weight = Matrix(layer.weight.rows(), layer.weight.cols());
    gl.bias = delta;
    for (std::size_t r = 0; r < layer.weight.rows(); ++r) {
      auto row = gl.weight.row(r);
      for (std::size_t c = 0; c < in.size(); ++c) row[c] = delta[r] * in[c];
    }
    Vector prev(layer.weight.cols(), 0.0);
    for (std::size_t r = 0; r < layer.weight.rows(); ++r) {
      const auto wr = layer.weight.row(r);
      for (std::size_t c = 0; c < prev.size(); ++c) prev[c] += wr[c] * delta[r];
    }
    delta = std::move(prev);
  }
  g.input = std::move(delta);
  return g;
}

// Accumulates `scale * src` into `dst` parameter-wise.
inline void axpy(std::vector<DenseLayer>& dst, const std::vector<DenseLayer>& src, double scale) {
  for (std::size_t l = 0; l < dst.size(); ++l) {
    auto dw = dst[l].weight.data();
    const auto sw = src[l].weight.data();
    for (std::size_t k = 0; k < dw.size(); ++k) dw[k] += scale * sw[k];
    for (std::size_t k = 0; k < dst[l].bias.size(); ++k) dst[l].bias[k] += scale * src[l].bias[k];
  }
}

inline std::vector<DenseLayer> zeros_like(const Mlp& m) {
  std::vector<DenseLayer> z;
  for (const auto& l : m.layers) {
    z.push_back({Matrix(l.weight.rows(), l.weight.cols()), Vector(l.bias.size(), 0.0)});
  }
  return z;
}

// ---------------------------------------------------------------------------
// Checkpoints: EMB1 archives with f32 parameters.

inline void add_to_archive(Archive& a, const std::string& prefix, const LinearProbe& p) {
  a.add(prefix + ".weight", p.weight);
  a.add(prefix + ".bias", row_matrix(p.bias));
}

inline LinearProbe probe_from_archive(const Archive& a, const std::string& prefix) {
  return {a.tensor(prefix + ".weight"), as_vector(a.tensor(prefix + ".bias"))};
}

inline void add_to_archive(Archive& a, const std::string& prefix, const Mlp& m) {
  OrderedJson shapes = OrderedJson::array();
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const std::string name = prefix + "." + std::to_string(l);
    a.add(name + ".weight", m.layers[l].weight);
    a.add(name + ".bias", row_matrix(m.layers[l].bias));
    shapes.push_back({m.layers[l].weight.rows(), m.layers[l].weight.cols()});
  }
  a.meta[prefix + ".layers"] = shapes;
}

inline Mlp mlp_from_archive(const Archive& a, const std::string& prefix) {
  Mlp m;
  try {
    const std::size_t depth = a.meta.at(prefix + ".layers").size();
    for (std::size_t l = 0; l < depth; ++l) {
      const std::string name = prefix + "." + std::to_string(l);
      m.layers.push_back({a.tensor(name + ".weight"), as_vector(a.tensor(name + ".bias"))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint is missing layer metadata for '" + prefix + "'");
  }
  m.validate();
  return m;
}

inline void write_probe(const std::filesystem::path& path, const LinearProbe& p) {
  Archive a;
  a.kind = "probe";
  add_to_archive(a, "probe", p);
  write_archive(path, a, Dtype::f32);
}

inline LinearProbe read_probe(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  if (a.kind != "probe") throw FormatError(path.string() + " is not a probe checkpoint");
  return probe_from_archive(a, "probe");
}

}  // namespace oodforge
