#pragma once

// Post-hoc OOD detectors. Every score is an inlier score: higher means more
// in-domain.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "oodforge/container.hpp"
#include "oodforge/dataio.hpp"
#include "oodforge/error.hpp"
#include "oodforge/evt.hpp"
#include "oodforge/nnet.hpp"
#include "oodforge/numerics.hpp"

namespace oodforge {

// ---------------------------------------------------------------------------
// Logit-only scores

inline double score_maxsoftmax(std::span<const double> logits) {
  if (logits.size() < 2) throw ConfigError("score_maxsoftmax: need at least two logits");
  const Vector p = softmax(logits);
  return *std::max_element(p.begin(), p.end());
}

inline double score_maxlogit(std::span<const double> logits) {
  if (logits.empty()) throw ConfigError("score_maxlogit: empty logits");
  return *std::max_element(logits.begin(), logits.end());
}

// Negative free energy T * logsumexp(logits / T).
inline double score_energy(std::span<const double> logits, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw ConfigError("score_energy: temperature must be > 0");
  Vector scaled(logits.begin(), logits.end());
  for (double& v : scaled) v /= temperature;
  return temperature * logsumexp(scaled);
}

// ---------------------------------------------------------------------------
// Mahalanobis with a tied covariance

struct MahalanobisState {
  std::vector<Vector> class_means;
  Matrix precision_chol;  // Cholesky factor L of the regularised covariance
  double ridge = 0.0;
};

// Means per class and the pooled within-class covariance
//   S = (1/N) sum_c sum_{i in c} (x_i - mu_c)(x_i - mu_c)^T
// regularised by ridge = max(1e-6 * trace(S) / F_d, 1e-12).
inline MahalanobisState fit_mahalanobis(const LabeledEmbeddings& train) {
  const auto& ys = train.require_labels("fit_mahalanobis");
  const std::size_t d = train.dim();
  const std::size_t classes = train.num_classes();
  const auto counts = class_counts(ys, classes);
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] < 2) {
      throw ConfigError("fit_mahalanobis: class " + std::to_string(c) + " has " +
                        std::to_string(counts[c]) + " samples, need >= 2");
    }
  }
  MahalanobisState st;
  st.class_means.assign(classes, Vector(d, 0.0));
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto& mu = st.class_means[static_cast<std::size_t>(ys[i])];
    const auto x = train.features.row(i);
    for (std::size_t k = 0; k < d; ++k) mu[k] += x[k];
  }
  for (std::size_t c = 0; c < classes; ++c)
    for (double& v : st.class_means[c]) v /= static_cast<double>(counts[c]);

  Matrix cov(d, d);
  Vector diff(d);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& mu = st.class_means[static_cast<std::size_t>(ys[i])];
    const auto x = train.features.row(i);
    for (std::size_t k = 0; k < d; ++k) diff[k] = x[k] - mu[k];
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c <= r; ++c) cov(r, c) += diff[r] * diff[c];
  }
  const double inv_n = 1.0 / static_cast<double>(train.size());
  double trace = 0.0;
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c <= r; ++c) {
      cov(r, c) *= inv_n;
      cov(c, r) = cov(r, c);
    }
    trace += cov(r, r);
  }
  st.ridge = std::max(1e-6 * trace / static_cast<double>(d), 1e-12);
  for (std::size_t r = 0; r < d; ++r) cov(r, r) += st.ridge;
  st.precision_chol = cholesky(cov);
  return st;
}

// Squared Mahalanobis distance to each class mean.
inline Vector mahalanobis_distances(const MahalanobisState& st, std::span<const double> x) {
  const std::size_t d = st.precision_chol.rows();
  if (x.size() != d) {
    throw ConfigError("score_mahalanobis: input has dimension " + std::to_string(x.size()) +
                      ", state expects " + std::to_string(d));
  }
  Vector out;
  out.reserve(st.class_means.size());
  Vector diff(d);
  for (const auto& mu : st.class_means) {
    for (std::size_t k = 0; k < d; ++k) diff[k] = x[k] - mu[k];
    const Vector y = forward_substitute(st.precision_chol, diff);
    out.push_back(dot(y, y));
  }
  return out;
}

inline double score_mahalanobis(const MahalanobisState& st, std::span<const double> x) {
  const Vector dist = mahalanobis_distances(st, x);
  return -*std::min_element(dist.begin(), dist.end());
}

// ---------------------------------------------------------------------------
// ODIN in embedding space

enum class OdinMode { perturbed, difference };

struct OdinConfig {
  double temperature = 1000.0;
  double epsilon = 0.0014;
  OdinMode mode = OdinMode::perturbed;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("odin: temperature must be > 0");
    if (!(epsilon >= 0.0)) throw ConfigError("odin: epsilon must be >= 0");
  }
};

namespace detail {

inline Vector scaled(std::span<const double> v, double inv) {
  Vector out(v.begin(), v.end());
  for (double& x : out) x *= inv;
  return out;
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// d log S_yhat / d logits = (onehot(yhat) - S) / T. The yhat entry is summed
// from the other probabilities; 1 - S_yhat cancels when the softmax saturates.
inline Vector odin_output_grad(const Vector& s, double temperature) {
  const std::size_t yhat = argmax(s);
  Vector g(s.size());
  double rest = 0.0;
  for (std::size_t c = 0; c < s.size(); ++c) {
    if (c == yhat) continue;
    g[c] = -s[c] / temperature;
    rest += s[c];
  }
  g[yhat] = rest / temperature;
  return g;
}

template <typename LogitsFn>
double odin_from_gradient(LogitsFn&& logits_of, std::span<const double> x, const Vector& grad,
                          const OdinConfig& cfg) {
  const double base = score_maxsoftmax(scaled(logits_of(x), 1.0 / cfg.temperature));
  if (cfg.epsilon == 0.0 && cfg.mode == OdinMode::perturbed) return base;
  Vector xt(x.begin(), x.end());
  for (std::size_t k = 0; k < xt.size(); ++k) xt[k] += cfg.epsilon * sign(grad[k]);
  const double perturbed = score_maxsoftmax(scaled(logits_of(xt), 1.0 / cfg.temperature));
  return cfg.mode == OdinMode::perturbed ? perturbed : perturbed - base;
}

}  // namespace detail

// Closed form for a linear probe, with S = softmax((W x + b) / T) and
// yhat = argmax S:   grad_x log S_yhat = (W_yhat - sum_c S_c W_c) / T.
inline Vector odin_input_gradient(const LinearProbe& p, std::span<const double> x,
                                  double temperature) {
  const Vector s = softmax(detail::scaled(probe_logits(p, x), 1.0 / temperature));
  const Vector coefs = detail::odin_output_grad(s, temperature);
  Vector g(p.input_dim(), 0.0);
  for (std::size_t c = 0; c < p.classes(); ++c) {
    const double coef = coefs[c];
    const auto wc = p.weight.row(c);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += coef * wc[k];
  }
  return g;
}

// Same gradient for an MLP classifier via reverse mode.
inline Vector odin_input_gradient(const Mlp& m, std::span<const double> x, double temperature) {
  const MlpOutput f = mlp_forward(m, x);
  const Vector s = softmax(detail::scaled(f.output, 1.0 / temperature));
  return mlp_backward(m, f.tape, detail::odin_output_grad(s, temperature)).input;
}

inline double score_odin(const LinearProbe& p, std::span<const double> x, const OdinConfig& cfg) {
  cfg.validate();
  return detail::odin_from_gradient([&](std::span<const double> v) { return probe_logits(p, v); },
                                    x, odin_input_gradient(p, x, cfg.temperature), cfg);
}

inline double score_odin(const Mlp& m, std::span<const double> x, const OdinConfig& cfg) {
  cfg.validate();
  return detail::odin_from_gradient(
      [&](std::span<const double> v) { return mlp_forward(m, v).output; }, x,
      odin_input_gradient(m, x, cfg.temperature), cfg);
}

// ---------------------------------------------------------------------------
// KL matching

enum class KlMode { per_class, global };

inline constexpr double kKlClamp = 1e-10;

struct KlMatchingState {
  std::vector<Vector> typical;  // one posterior per predicted class (or one, global)
};

namespace detail {

inline Vector clamp_renormalize(std::span<const double> p) {
  Vector q(p.begin(), p.end());
  double s = 0.0;
  for (double& v : q) {
    v = std::max(v, kKlClamp);
    s += v;
  }
  for (double& v : q) v /= s;
  return q;
}

inline void require_distribution(std::span<const double> p, const char* who) {
  double s = 0.0;
  for (double v : p) {
    if (v < 0.0) throw ConfigError(std::string(who) + ": negative probability");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-6) throw ConfigError(std::string(who) + ": row does not sum to 1");
}

}  // namespace detail

inline KlMatchingState fit_klmatching(const Matrix& posteriors, KlMode mode = KlMode::per_class) {
  if (posteriors.rows() == 0) throw ConfigError("fit_klmatching: no validation rows");
  const std::size_t classes = posteriors.cols();
  Vector global(classes, 0.0);
  std::vector<Vector> sums(classes, Vector(classes, 0.0));
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t i = 0; i < posteriors.rows(); ++i) {
    const auto p = posteriors.row(i);
    detail::require_distribution(p, "fit_klmatching");
    const std::size_t k = argmax(p);
    ++counts[k];
    for (std::size_t c = 0; c < classes; ++c) {
      sums[k][c] += p[c];
      global[c] += p[c];
    }
  }
  for (double& v : global) v /= static_cast<double>(posteriors.rows());
  KlMatchingState st;
  if (mode == KlMode::global) {
    st.typical.push_back(detail::clamp_renormalize(global));
    return st;
  }
  for (std::size_t k = 0; k < classes; ++k) {
    if (counts[k] == 0) {
      st.typical.push_back(detail::clamp_renormalize(global));
      continue;
    }
    for (double& v : sums[k]) v /= static_cast<double>(counts[k]);
    st.typical.push_back(detail::clamp_renormalize(sums[k]));
  }
  return st;
}

inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

inline double score_klmatching(const KlMatchingState& st, std::span<const double> posterior) {
  detail::require_distribution(posterior, "score_klmatching");
  const Vector p = detail::clamp_renormalize(posterior);
  double best = INFINITY;
  for (const auto& d : st.typical) {
    if (d.size() != p.size()) throw ConfigError("score_klmatching: class count mismatch");
    best = std::min(best, kl_divergence(p, d));
  }
  return -best;
}

// ---------------------------------------------------------------------------
// OpenMax

// Rank weight for the i-th ranked class (1-based):
//   inclusive: (alpha - i + 1) / alpha, so alpha = 1 revises the top class;
//   exclusive: (alpha - i) / alpha, under which alpha = 1 changes nothing.
enum class RankOffset { inclusive, exclusive };

struct OpenMaxState {
  std::vector<Vector> mavs;
  std::vector<WeibullModel> weibulls;
  std::size_t alpha = 1;
  std::size_t tail = 20;
  RankOffset rank_offset = RankOffset::inclusive;
};

// alpha = 0 selects alpha = C.
inline OpenMaxState fit_openmax(const Matrix& train_logits, const Labels& labels,
                                std::size_t tail = 20, std::size_t alpha = 0,
                                RankOffset rank_offset = RankOffset::inclusive) {
  if (labels.size() != train_logits.rows()) throw ConfigError("fit_openmax: label count mismatch");
  const std::size_t classes = train_logits.cols();
  if (classes < 2) throw ConfigError("fit_openmax: need at least two classes");
  if (alpha == 0) alpha = classes;
  if (alpha > classes) throw ConfigError("fit_openmax: alpha exceeds the class count");
  if (tail < 2) throw ConfigError("fit_openmax: tail must be >= 2");

  std::vector<std::vector<std::size_t>> correct(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || y >= classes) throw ConfigError("fit_openmax: label out of range");
    if (argmax(train_logits.row(i)) == y) correct[y].push_back(i);
  }
  OpenMaxState st;
  st.alpha = alpha;
  st.tail = tail;
  st.rank_offset = rank_offset;
  for (std::size_t c = 0; c < classes; ++c) {
    if (correct[c].size() < tail) {
      throw ConfigError("fit_openmax: class " + std::to_string(c) + " has " +
                        std::to_string(correct[c].size()) +
                        " correctly classified samples, tail size is " + std::to_string(tail));
    }
    Vector mav(classes, 0.0);
    for (std::size_t i : correct[c]) {
      const auto v = train_logits.row(i);
      for (std::size_t k = 0; k < classes; ++k) mav[k] += v[k];
    }
    for (double& v : mav) v /= static_cast<double>(correct[c].size());
    Vector dist;
    dist.reserve(correct[c].size());
    Vector diff(classes);
    for (std::size_t i : correct[c]) {
      const auto v = train_logits.row(i);
      for (std::size_t k = 0; k < classes; ++k) diff[k] = v[k] - mav[k];
      dist.push_back(norm2(diff));
    }
    try {
      st.weibulls.push_back(fit_weibull_tail(dist, tail));
    } catch (const NumericalError& e) {
      throw NumericalError("fit_openmax: class " + std::to_string(c) + ": " + e.what());
    }
    st.mavs.push_back(std::move(mav));
  }
  return st;
}

struct OpenMaxRevision {
  Vector revised;        // [v0_hat, v1_hat, ..., vC_hat]
  Vector probabilities;  // softmax of `revised`
};

inline OpenMaxRevision openmax_revise(const OpenMaxState& st, std::span<const double> v) {
  const std::size_t classes = st.mavs.size();
  if (v.size() != classes) {
    throw ConfigError("score_openmax: logits have length " + std::to_string(v.size()) +
                      ", state expects " + std::to_string(classes));
  }
  std::vector<std::size_t> order(classes);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  Vector omega(classes, 1.0);
  const double alpha = static_cast<double>(st.alpha);
  Vector diff(classes);
  for (std::size_t i = 1; i <= st.alpha; ++i) {
    const std::size_t j = order[i - 1];
    for (std::size_t k = 0; k < classes; ++k) diff[k] = v[k] - st.mavs[j][k];
    const double rank = st.rank_offset == RankOffset::inclusive
                            ? (alpha - static_cast<double>(i) + 1.0) / alpha
                            : (alpha - static_cast<double>(i)) / alpha;
    omega[j] = 1.0 - rank * weibull_cdf(st.weibulls[j], norm2(diff));
  }
  OpenMaxRevision r;
  r.revised.assign(classes + 1, 0.0);
  for (std::size_t j = 0; j < classes; ++j) {
    r.revised[j + 1] = v[j] * omega[j];
    r.revised[0] += v[j] * (1.0 - omega[j]);
  }
  r.probabilities = softmax(r.revised);
  return r;
}

inline double score_openmax(const OpenMaxState& st, std::span<const double> v) {
  const OpenMaxRevision r = openmax_revise(st, v);
  return *std::max_element(r.probabilities.begin() + 1, r.probabilities.end());
}

// ---------------------------------------------------------------------------
// Thresholding

struct Threshold {
  double tau = 0.0;
};

enum class Decision { in_domain, out_of_domain };

inline Decision classify_ood(double score, Threshold th) {
  return score >= th.tau ? Decision::in_domain : Decision::out_of_domain;
}

// Threshold accepting at least `tpr` of the given in-domain scores.
inline Threshold threshold_at_tpr(std::span<const double> id_scores, double tpr = 0.95) {
  return {percentile_nearest_rank(id_scores, 1.0 - tpr)};
}

// ---------------------------------------------------------------------------
// Uniform detector interface used by the pipeline

enum class DetectorKind { mahalanobis, maxlogit, maxsoftmax, odin, openmax, energy, klmatching };

// Report order.
inline constexpr DetectorKind kAllDetectors[] = {
    DetectorKind::mahalanobis, DetectorKind::maxlogit, DetectorKind::maxsoftmax,
    DetectorKind::odin,        DetectorKind::openmax,  DetectorKind::energy,
    DetectorKind::klmatching};

inline std::string_view detector_name(DetectorKind k) {
  switch (k) {
    case DetectorKind::mahalanobis: return "Mahalanobis";
    case DetectorKind::maxlogit: return "MaxLogit";
    case DetectorKind::maxsoftmax: return "MaxSoftmax";
    case DetectorKind::odin: return "ODIN";
    case DetectorKind::openmax: return "OpenMax";
    case DetectorKind::energy: return "EnergyBased";
    case DetectorKind::klmatching: return "KLMatching";
  }
  return "";
}

inline DetectorKind parse_detector(std::string_view name) {
  for (DetectorKind k : kAllDetectors)
    if (detector_name(k) == name) return k;
  throw ConfigError("unknown detector '" + std::string(name) +
                    "' (expected one of Mahalanobis, MaxLogit, MaxSoftmax, ODIN, OpenMax, "
                    "EnergyBased, KLMatching)");
}

struct DetectorParams {
  double energy_temperature = 1.0;
  OdinConfig odin;
  KlMode kl_mode = KlMode::per_class;
  std::size_t openmax_tail = 20;
  std::size_t openmax_alpha = 0;  // 0 = number of classes
  RankOffset openmax_rank_offset = RankOffset::inclusive;
};

struct Stateless {};

using DetectorState = std::variant<Stateless, MahalanobisState, KlMatchingState, OpenMaxState>;

struct FittedDetector {
  DetectorKind kind;
  DetectorParams params;
  DetectorState state;
};

// Everything a detector may consume. `features` are the probe's inputs
// (already normalised / projected); logits are probe outputs over them.
struct FitInputs {
  const LabeledEmbeddings* train_features = nullptr;
  const Matrix* train_logits = nullptr;
  const Matrix* val_logits = nullptr;
};

struct ScoreInputs {
  const Matrix* features = nullptr;
  const Matrix* logits = nullptr;
  const LinearProbe* probe = nullptr;
};

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const Vector s = softmax(logits.row(i));
    std::copy(s.begin(), s.end(), p.row(i).begin());
  }
  return p;
}

inline FittedDetector fit_detector(DetectorKind kind, const DetectorParams& params,
                                   const FitInputs& in) {
  FittedDetector fd{kind, params, Stateless{}};
  switch (kind) {
    case DetectorKind::mahalanobis:
      if (!in.train_features) throw ConfigError("Mahalanobis needs training features");
      fd.state = fit_mahalanobis(*in.train_features);
      break;
    case DetectorKind::klmatching:
      if (!in.val_logits) throw ConfigError("KLMatching needs validation logits");
      fd.state = fit_klmatching(softmax_rows(*in.val_logits), params.kl_mode);
      break;
    case DetectorKind::openmax:
      if (!in.train_logits || !in.train_features) throw ConfigError("OpenMax needs train logits");
      fd.state = fit_openmax(*in.train_logits,
                             in.train_features->require_labels("fit_openmax"),
                             params.openmax_tail, params.openmax_alpha,
                             params.openmax_rank_offset);
      break;
    case DetectorKind::odin:
      params.odin.validate();
      break;
    case DetectorKind::energy:
      if (!(params.energy_temperature > 0.0)) {
        throw ConfigError("EnergyBased: temperature must be > 0");
      }
      break;
    default:
      break;
  }
  return fd;
}

inline double score_one(const FittedDetector& fd, const ScoreInputs& in, std::size_t i) {
  const auto need_logits = [&]() -> std::span<const double> {
    if (!in.logits) throw ConfigError(std::string(detector_name(fd.kind)) + " needs logits");
    return in.logits->row(i);
  };
  switch (fd.kind) {
    case DetectorKind::mahalanobis:
      if (!in.features) throw ConfigError("Mahalanobis needs features");
      return score_mahalanobis(std::get<MahalanobisState>(fd.state), in.features->row(i));
    case DetectorKind::maxlogit: return score_maxlogit(need_logits());
    case DetectorKind::maxsoftmax: return score_maxsoftmax(need_logits());
    case DetectorKind::energy: return score_energy(need_logits(), fd.params.energy_temperature);
    case DetectorKind::odin:
      if (!in.features || !in.probe) throw ConfigError("ODIN needs features and a probe");
      return score_odin(*in.probe, in.features->row(i), fd.params.odin);
    case DetectorKind::klmatching:
      return score_klmatching(std::get<KlMatchingState>(fd.state), softmax(need_logits()));
    case DetectorKind::openmax:
      return score_openmax(std::get<OpenMaxState>(fd.state), need_logits());
  }
  return 0.0;
}

inline std::size_t score_rows(const ScoreInputs& in) {
  if (in.features) return in.features->rows();
  if (in.logits) return in.logits->rows();
  return 0;
}

inline Vector score_detector(const FittedDetector& fd, const ScoreInputs& in) {
  Vector out(score_rows(in));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = score_one(fd, in, i);
  return out;
}

// ---------------------------------------------------------------------------
// Detector state archives (f64 so that reloaded states score identically).

namespace detail {

inline Matrix stack_rows(const std::vector<Vector>& rows) {
  if (rows.empty()) return Matrix();
  std::vector<double> data;
  for (const auto& r : rows) data.insert(data.end(), r.begin(), r.end());
  return Matrix(rows.size(), rows.front().size(), std::move(data));
}

inline std::vector<Vector> unstack_rows(const Matrix& m) {
  std::vector<Vector> rows;
  for (std::size_t i = 0; i < m.rows(); ++i) rows.emplace_back(m.row(i).begin(), m.row(i).end());
  return rows;
}

}  // namespace detail

inline Archive detector_to_archive(const FittedDetector& fd) {
  Archive a;
  a.kind = "detector";
  const auto& p = fd.params;
  a.meta["method"] = detector_name(fd.kind);
  a.meta["energy_temperature"] = p.energy_temperature;
  a.meta["odin_temperature"] = p.odin.temperature;
  a.meta["odin_epsilon"] = p.odin.epsilon;
  a.meta["odin_mode"] = p.odin.mode == OdinMode::perturbed ? "perturbed" : "difference";
  a.meta["kl_mode"] = p.kl_mode == KlMode::per_class ? "per_class" : "global";
  a.meta["openmax_tail"] = p.openmax_tail;
  a.meta["openmax_alpha"] = p.openmax_alpha;
  a.meta["openmax_rank_offset"] =
      p.openmax_rank_offset == RankOffset::inclusive ? "inclusive" : "exclusive";
  if (const auto* m = std::get_if<MahalanobisState>(&fd.state)) {
    a.meta["ridge"] = m->ridge;
    a.add("class_means", detail::stack_rows(m->class_means));
    a.add("precision_chol", m->precision_chol);
  } else if (const auto* k = std::get_if<KlMatchingState>(&fd.state)) {
    a.add("typical", detail::stack_rows(k->typical));
  } else if (const auto* o = std::get_if<OpenMaxState>(&fd.state)) {
    a.meta["alpha"] = o->alpha;
    a.add("mavs", detail::stack_rows(o->mavs));
    Matrix w(o->weibulls.size(), 3);
    for (std::size_t c = 0; c < o->weibulls.size(); ++c) {
      w(c, 0) = o->weibulls[c].shape;
      w(c, 1) = o->weibulls[c].scale;
      w(c, 2) = o->weibulls[c].shift;
    }
    a.add("weibull", w);
  }
  return a;
}

inline FittedDetector detector_from_archive(const Archive& a) {
  if (a.kind != "detector") throw FormatError("archive is not a detector state");
  try {
    FittedDetector fd{parse_detector(a.meta.at("method").get<std::string>()), {}, Stateless{}};
    auto& p = fd.params;
    p.energy_temperature = a.meta.at("energy_temperature").get<double>();
    p.odin.temperature = a.meta.at("odin_temperature").get<double>();
    p.odin.epsilon = a.meta.at("odin_epsilon").get<double>();
    p.odin.mode = a.meta.at("odin_mode").get<std::string>() == "difference" ? OdinMode::difference
                                                                             : OdinMode::perturbed;
    p.kl_mode = a.meta.at("kl_mode").get<std::string>() == "global" ? KlMode::global
                                                                     : KlMode::per_class;
    p.openmax_tail = a.meta.at("openmax_tail").get<std::size_t>();
    p.openmax_alpha = a.meta.at("openmax_alpha").get<std::size_t>();
    p.openmax_rank_offset = a.meta.at("openmax_rank_offset").get<std::string>() == "exclusive"
                                ? RankOffset::exclusive
                                : RankOffset::inclusive;
    switch (fd.kind) {
      case DetectorKind::mahalanobis: {
        MahalanobisState m;
        m.ridge = a.meta.at("ridge").get<double>();
        m.class_means = detail::unstack_rows(a.tensor("class_means"));
        m.precision_chol = a.tensor("precision_chol");
        fd.state = std::move(m);
        break;
      }
      case DetectorKind::klmatching:
        fd.state = KlMatchingState{detail::unstack_rows(a.tensor("typical"))};
        break;
      case DetectorKind::openmax: {
        OpenMaxState o;
        o.alpha = a.meta.at("alpha").get<std::size_t>();
        o.tail = p.openmax_tail;
        o.rank_offset = p.openmax_rank_offset;
        o.mavs = detail::unstack_rows(a.tensor("mavs"));
        const Matrix& w = a.tensor("weibull");
        for (std::size_t c = 0; c < w.rows(); ++c) o.weibulls.push_back({w(c, 0), w(c, 1), w(c, 2)});
        fd.state = std::move(o);
        break;
      }
      default:
        break;
    }
    return fd;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed detector state: ") + e.what());
  }
}

inline void write_detector(const std::filesystem::path& path, const FittedDetector& fd) {
  write_archive(path, detector_to_archive(fd), Dtype::f64);
}

inline FittedDetector read_detector(const std::filesystem::path& path) {
  return detector_from_archive(read_archive(path));
}

}  // namespace oodforge
