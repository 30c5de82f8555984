#pragma once

// Hyperspherical refinement: a projection head (and optional adapter) trained
// with a prototype dispersion loss and a compactness loss, followed by a
// linear probe on the frozen projection.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "oodforge/container.hpp"
#include "oodforge/dataio.hpp"
#include "oodforge/error.hpp"
#include "oodforge/nnet.hpp"
#include "oodforge/numerics.hpp"
#include "oodforge/random.hpp"

namespace oodforge {

struct PrototypeBank {
  std::vector<Vector> prototypes;
  double momentum = 0.95;    // alpha_proto
  double temperature = 0.1;  // tau_c

  std::size_t classes() const noexcept { return prototypes.size(); }
  std::size_t dim() const noexcept { return prototypes.empty() ? 0 : prototypes.front().size(); }

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("prototype bank: temperature must be > 0");
    if (!(momentum >= 0.0 && momentum <= 1.0)) {
      throw ConfigError("prototype bank: momentum must lie in [0, 1]");
    }
    for (const auto& p : prototypes) {
      if (p.size() != dim()) throw ConfigError("prototype bank: ragged prototypes");
      if (std::abs(norm2(p) - 1.0) > 1e-9) throw ConfigError("prototype bank: non-unit prototype");
    }
  }
};

struct CiderConfig {
  // Head widths between F_d and F_h; unset means one hidden layer of width F_d.
  std::optional<std::vector<std::size_t>> hidden;
  std::size_t projection_dim = 128;  // F_h
  double temperature = 0.1;
  double momentum = 0.95;
  double lambda_comp = 1.0;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
  bool adapter_enabled = false;
  bool freeze_head = false;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("cider config: temperature must be > 0");
    if (!(momentum >= 0.0 && momentum <= 1.0)) {
      throw ConfigError("cider config: momentum must lie in [0, 1]");
    }
    if (!(lambda_comp >= 0.0)) throw ConfigError("cider config: lambda_comp must be >= 0");
    if (projection_dim < 1) throw ConfigError("cider config: projection_dim must be >= 1");
    if (batch_size < 1) throw ConfigError("cider config: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("cider config: learning_rate must be > 0");
    if (hidden)
      for (std::size_t w : *hidden)
        if (w < 1) throw ConfigError("cider config: hidden widths must be >= 1");
  }

  std::vector<std::size_t> head_dims(std::size_t input_dim) const {
    std::vector<std::size_t> dims{input_dim};
    if (hidden) {
      dims.insert(dims.end(), hidden->begin(), hidden->end());
    } else {
      dims.push_back(input_dim);
    }
    dims.push_back(projection_dim);
    return dims;
  }
};

inline OrderedJson cider_config_to_json(const CiderConfig& c) {
  OrderedJson j;
  if (c.hidden) j["hidden"] = *c.hidden;
  j["projection_dim"] = c.projection_dim;
  j["temperature"] = c.temperature;
  j["momentum"] = c.momentum;
  j["lambda_comp"] = c.lambda_comp;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["seed"] = c.seed;
  j["adapter_enabled"] = c.adapter_enabled;
  j["freeze_head"] = c.freeze_head;
  return j;
}

// Missing keys keep their defaults; unknown keys are rejected.
template <typename Json>
CiderConfig cider_config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("cider config must be a JSON object");
  CiderConfig c;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const auto& v = it.value();
      if (k == "hidden") {
        c.hidden = v.template get<std::vector<std::size_t>>();
      } else if (k == "projection_dim") {
        c.projection_dim = v.template get<std::size_t>();
      } else if (k == "temperature") {
        c.temperature = v.template get<double>();
      } else if (k == "momentum") {
        c.momentum = v.template get<double>();
      } else if (k == "lambda_comp") {
        c.lambda_comp = v.template get<double>();
      } else if (k == "epochs") {
        c.epochs = v.template get<std::size_t>();
      } else if (k == "batch_size") {
        c.batch_size = v.template get<std::size_t>();
      } else if (k == "learning_rate") {
        c.learning_rate = v.template get<double>();
      } else if (k == "seed") {
        c.seed = v.template get<std::uint64_t>();
      } else if (k == "adapter_enabled") {
        c.adapter_enabled = v.template get<bool>();
      } else if (k == "freeze_head") {
        c.freeze_head = v.template get<bool>();
      } else {
        throw ConfigError("cider config: unknown key '" + k + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("cider config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Losses

struct CompactnessLoss {
  double loss = 0.0;
  Matrix grad_z;  // N x F_h
};

// L_comp = -(1/N) sum_i log softmax_j(z_i . mu_j / tau)[y_i]
//   dL/dz_i = (1/N) (sum_j p_ij mu_j - mu_{y_i}) / tau
inline CompactnessLoss loss_compactness(const Matrix& z, std::span<const int> labels,
                                        const PrototypeBank& bank) {
  if (labels.size() != z.rows()) throw ConfigError("loss_compactness: label count mismatch");
  if (z.rows() == 0) throw ConfigError("loss_compactness: empty batch");
  if (z.cols() != bank.dim()) throw ConfigError("loss_compactness: dimension mismatch");
  const std::size_t classes = bank.classes();
  const double inv_t = 1.0 / bank.temperature;
  const double inv_n = 1.0 / static_cast<double>(z.rows());
  CompactnessLoss out{0.0, Matrix(z.rows(), z.cols())};
  Vector s(classes);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto zi = z.row(i);
    if (std::abs(norm2(zi) - 1.0) > 1e-6) {
      throw ConfigError("loss_compactness: row " + std::to_string(i) + " is not unit norm");
    }
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ConfigError("loss_compactness: label " + std::to_string(labels[i]) + " out of range");
    }
    const auto y = static_cast<std::size_t>(labels[i]);
    for (std::size_t j = 0; j < classes; ++j) s[j] = dot(zi, bank.prototypes[j]) * inv_t;
    const double lse = logsumexp(s);
    out.loss += (lse - s[y]) * inv_n;
    auto g = out.grad_z.row(i);
    for (std::size_t j = 0; j < classes; ++j) {
      const double coef = (std::exp(s[j] - lse) - (j == y ? 1.0 : 0.0)) * inv_t * inv_n;
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += coef * bank.prototypes[j][k];
    }
  }
  return out;
}

struct DispersionLoss {
  double loss = 0.0;
  std::vector<Vector> grad_prototypes;
};

// L_dis = (1/C) sum_i log[(1/(C-1)) sum_{j != i} exp(mu_i . mu_j / tau)]
// With q_ij the softmax over j != i of mu_i . mu_j / tau:
//   dL/dmu_k = (1/(C tau)) (sum_{j != k} q_kj mu_j + sum_{i != k} q_ik mu_i)
inline DispersionLoss loss_dispersion(const PrototypeBank& bank) {
  const std::size_t classes = bank.classes();
  if (classes < 2) throw ConfigError("loss_dispersion: need at least two prototypes");
  const double inv_t = 1.0 / bank.temperature;
  const double inv_c = 1.0 / static_cast<double>(classes);
  const std::size_t d = bank.dim();
  DispersionLoss out{0.0, std::vector<Vector>(classes, Vector(d, 0.0))};
  Vector s(classes - 1);
  std::vector<std::size_t> others(classes - 1);
  for (std::size_t i = 0; i < classes; ++i) {
    std::size_t n = 0;
    for (std::size_t j = 0; j < classes; ++j) {
      if (j == i) continue;
      others[n] = j;
      s[n++] = dot(bank.prototypes[i], bank.prototypes[j]) * inv_t;
    }
    const double lse = logsumexp(s);
    out.loss += (lse - std::log(static_cast<double>(classes - 1))) * inv_c;
    for (std::size_t m = 0; m < others.size(); ++m) {
      const double coef = std::exp(s[m] - lse) * inv_t * inv_c;
      const std::size_t j = others[m];
      for (std::size_t k = 0; k < d; ++k) {
        out.grad_prototypes[i][k] += coef * bank.prototypes[j][k];
        out.grad_prototypes[j][k] += coef * bank.prototypes[i][k];
      }
    }
  }
  return out;
}

// Sequential EMA in batch order: mu_y <- normalize(alpha mu_y + (1 - alpha) z).
inline PrototypeBank update_prototypes(PrototypeBank bank, const Matrix& z,
                                       std::span<const int> labels) {
  if (labels.size() != z.rows()) throw ConfigError("update_prototypes: label count mismatch");
  const double a = bank.momentum;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= bank.classes()) {
      throw ConfigError("update_prototypes: label out of range");
    }
    auto& mu = bank.prototypes[static_cast<std::size_t>(labels[i])];
    const auto zi = z.row(i);
    Vector mixed(mu.size());
    for (std::size_t k = 0; k < mu.size(); ++k) mixed[k] = a * mu[k] + (1.0 - a) * zi[k];
    mu = l2_normalize(mixed);
  }
  return bank;
}

// ---------------------------------------------------------------------------
// Model and projection

struct CiderModel {
  std::optional<Mlp> adapter;
  Mlp head;
  PrototypeBank bank;
  CiderConfig config;
};

// normalize(head(normalize(adapter(x)))); the adapter is the identity when
// absent.
inline Vector project(const Mlp& head, const std::optional<Mlp>& adapter,
                      std::span<const double> x) {
  const Vector a = adapter ? mlp_forward(*adapter, x).output : Vector(x.begin(), x.end());
  return l2_normalize(mlp_forward(head, l2_normalize(a)).output);
}

inline Vector project(const CiderModel& m, std::span<const double> x) {
  return project(m.head, m.adapter, x);
}

inline LabeledEmbeddings project_rows(const CiderModel& m, const LabeledEmbeddings& ds) {
  return map_rows(ds, [&](std::span<const double> x) { return project(m, x); });
}

// Mean cosine between each projected sample and its own class prototype.
inline double mean_prototype_cosine(const CiderModel& m, const LabeledEmbeddings& ds) {
  const auto& ys = ds.require_labels("mean_prototype_cosine");
  double s = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    s += dot(project(m, ds.features.row(i)), m.bank.prototypes[static_cast<std::size_t>(ys[i])]);
  }
  return s / static_cast<double>(ds.size());
}

// ---------------------------------------------------------------------------
// Training

struct CiderStep {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double dispersion = 0.0;
  double compactness = 0.0;
  const Matrix* projected = nullptr;  // d_p of the batch, forward pass
  const PrototypeBank* bank = nullptr;  // after the step's prototype updates
};

using CiderObserver = std::function<void(const CiderStep&)>;

struct CiderTrainResult {
  CiderModel model;
  std::vector<double> epoch_loss;         // L_dis + lambda L_comp, sample-weighted
  std::vector<double> epoch_dispersion;
  std::vector<double> epoch_compactness;
  double initial_dispersion = 0.0;
  double final_dispersion = 0.0;
};

namespace detail {

// Gradient of y = v / |v| pulled back from dL/dy: (g - (g . y) y) / |v|.
inline Vector normalize_backward(std::span<const double> g, std::span<const double> y,
                                 double norm) {
  const double gy = dot(g, y);
  Vector out(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) out[k] = (g[k] - gy * y[k]) / norm;
  return out;
}

inline void sgd_step(Mlp& m, const std::vector<DenseLayer>& grads, double lr) {
  axpy(m.layers, grads, -lr);
}

}  // namespace detail

// RNG stream (cfg.seed): one draw seeds the head initialisation, then one
// Fisher-Yates permutation per epoch. The adapter starts as the identity.
// Prototypes start at the normalised class means of the initial projections.
// Each minibatch: forward, L = L_dis + lambda L_comp, gradient step on the
// head/adapter and on the prototypes (then renormalised), then the EMA
// update with the forward-pass projections.
inline CiderTrainResult cider_train(const LabeledEmbeddings& data, const CiderConfig& cfg,
                                    const CiderObserver& observer = {}) {
  cfg.validate();
  const auto& ys = data.require_labels("cider_train");
  const std::size_t classes = data.num_classes();
  const auto counts = class_counts(ys, classes);
  const auto present = std::count_if(counts.begin(), counts.end(), [](auto n) { return n > 0; });
  if (present < 2) throw ConfigError("cider_train: training data contains a single class");
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] == 0) throw ConfigError("cider_train: class " + std::to_string(c) + " is empty");
  }

  Rng rng(cfg.seed);
  CiderTrainResult r;
  CiderModel& m = r.model;
  m.config = cfg;
  const auto dims = cfg.head_dims(data.dim());
  m.head = make_mlp(dims, rng.next());
  if (cfg.adapter_enabled) m.adapter = identity_mlp(data.dim());
  m.bank.momentum = cfg.momentum;
  m.bank.temperature = cfg.temperature;

  m.bank.prototypes.assign(classes, Vector(cfg.projection_dim, 0.0));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector z = project(m, data.features.row(i));
    auto& acc = m.bank.prototypes[static_cast<std::size_t>(ys[i])];
    for (std::size_t k = 0; k < z.size(); ++k) acc[k] += z[k];
  }
  for (auto& p : m.bank.prototypes) p = l2_normalize(p);
  r.initial_dispersion = loss_dispersion(m.bank).loss;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double lr = cfg.learning_rate;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double total = 0.0, dis_total = 0.0, comp_total = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const std::size_t n = stop - start;

      std::vector<MlpOutput> adapter_out, head_out;
      std::vector<double> adapter_norm(n), head_norm(n);
      Matrix dc(n, data.dim()), dp(n, cfg.projection_dim);
      Labels batch_labels(n);
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t i = order[start + b];
        batch_labels[b] = ys[i];
        const auto x = data.features.row(i);
        Vector a(x.begin(), x.end());
        if (m.adapter) {
          adapter_out.push_back(mlp_forward(*m.adapter, x));
          a = adapter_out.back().output;
        }
        adapter_norm[b] = norm2(a);
        const Vector c = l2_normalize(a);
        std::copy(c.begin(), c.end(), dc.row(b).begin());
        head_out.push_back(mlp_forward(m.head, c));
        head_norm[b] = norm2(head_out.back().output);
        const Vector p = l2_normalize(head_out.back().output);
        std::copy(p.begin(), p.end(), dp.row(b).begin());
      }

      const CompactnessLoss comp = loss_compactness(dp, batch_labels, m.bank);
      const DispersionLoss dis = loss_dispersion(m.bank);
      const double loss = dis.loss + cfg.lambda_comp * comp.loss;
      if (!std::isfinite(loss)) throw NumericalError("cider_train: loss is not finite");

      if (cfg.lambda_comp > 0.0 && (!cfg.freeze_head || m.adapter)) {
        auto head_grads = zeros_like(m.head);
        std::vector<DenseLayer> adapter_grads;
        if (m.adapter) adapter_grads = zeros_like(*m.adapter);
        for (std::size_t b = 0; b < n; ++b) {
          const Vector gz = detail::normalize_backward(comp.grad_z.row(b), dp.row(b), head_norm[b]);
          const MlpGrads hg = mlp_backward(m.head, head_out[b].tape, gz);
          axpy(head_grads, hg.layers, cfg.lambda_comp);
          if (m.adapter) {
            Vector ga = detail::normalize_backward(hg.input, dc.row(b), adapter_norm[b]);
            const MlpGrads ag = mlp_backward(*m.adapter, adapter_out[b].tape, ga);
            axpy(adapter_grads, ag.layers, cfg.lambda_comp);
          }
        }
        if (!cfg.freeze_head) detail::sgd_step(m.head, head_grads, lr);
        if (m.adapter) detail::sgd_step(*m.adapter, adapter_grads, lr);
      }

      for (std::size_t c = 0; c < classes; ++c) {
        auto& mu = m.bank.prototypes[c];
        for (std::size_t k = 0; k < mu.size(); ++k) mu[k] -= lr * dis.grad_prototypes[c][k];
        mu = l2_normalize(mu);
      }
      m.bank = update_prototypes(std::move(m.bank), dp, batch_labels);

      const double w = static_cast<double>(n);
      total += loss * w;
      dis_total += dis.loss * w;
      comp_total += comp.loss * w;
      if (observer) observer({epoch, batch_index, dis.loss, comp.loss, &dp, &m.bank});
    }
    const double inv = 1.0 / static_cast<double>(order.size());
    r.epoch_loss.push_back(total * inv);
    r.epoch_dispersion.push_back(dis_total * inv);
    r.epoch_compactness.push_back(comp_total * inv);
  }
  for (const auto& l : m.head.layers)
    for (double v : l.weight.data())
      if (!std::isfinite(v)) throw NumericalError("cider_train: head parameters diverged");
  r.final_dispersion = loss_dispersion(m.bank).loss;
  return r;
}

// ---------------------------------------------------------------------------
// Probe on the frozen projection

struct ProbeEvaluation {
  LinearProbe probe;
  double id_accuracy = 0.0;
};

inline double projected_accuracy(const CiderModel& m, const LinearProbe& p,
                                 const LabeledEmbeddings& data) {
  if (p.input_dim() != m.head.output_dim()) {
    throw ConfigError("probe expects dimension " + std::to_string(p.input_dim()) +
                      ", head produces " + std::to_string(m.head.output_dim()));
  }
  return probe_accuracy(p, project_rows(m, data));
}

inline ProbeEvaluation evaluate_with_probe(const CiderModel& m, const LabeledEmbeddings& train,
                                           const LabeledEmbeddings& test,
                                           const TrainConfig& cfg) {
  const LabeledEmbeddings projected = project_rows(m, train);
  ProbeEvaluation out;
  out.probe = train_probe(projected, cfg, {}, m.bank.classes()).probe;
  out.id_accuracy = projected_accuracy(m, out.probe, test);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline Archive cider_to_archive(const CiderModel& m) {
  Archive a;
  a.kind = "cider";
  a.meta["config"] = cider_config_to_json(m.config);
  a.meta["adapter"] = m.adapter.has_value();
  if (m.adapter) add_to_archive(a, "adapter", *m.adapter);
  add_to_archive(a, "head", m.head);
  Matrix protos(m.bank.classes(), m.bank.dim());
  for (std::size_t c = 0; c < m.bank.classes(); ++c) {
    std::copy(m.bank.prototypes[c].begin(), m.bank.prototypes[c].end(), protos.row(c).begin());
  }
  a.add("prototypes", std::move(protos));
  return a;
}

// Prototypes are renormalised after loading since f32 storage perturbs the
// unit norm.
inline CiderModel cider_from_archive(const Archive& a) {
  if (a.kind != "cider") throw FormatError("archive is not a cider checkpoint");
  CiderModel m;
  try {
    m.config = cider_config_from_json(a.meta.at("config"));
    if (a.meta.at("adapter").get<bool>()) m.adapter = mlp_from_archive(a, "adapter");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed cider checkpoint: ") + e.what());
  }
  m.head = mlp_from_archive(a, "head");
  m.bank.momentum = m.config.momentum;
  m.bank.temperature = m.config.temperature;
  const Matrix& protos = a.tensor("prototypes");
  for (std::size_t c = 0; c < protos.rows(); ++c) m.bank.prototypes.push_back(l2_normalize(protos.row(c)));
  return m;
}

inline void write_cider(const std::filesystem::path& path, const CiderModel& m) {
  write_archive(path, cider_to_archive(m), Dtype::f32);
}

inline CiderModel read_cider(const std::filesystem::path& path) {
  return cider_from_archive(read_archive(path));
}

}  // namespace oodforge
