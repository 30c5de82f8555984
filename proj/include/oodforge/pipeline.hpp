#pragma once

// End-to-end runs from a JSON config: load EMB1 files, train the probe (and
// the CIDER head for the cider condition), fit and score every detector,
// and write the report and checkpoints.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "oodforge/cider.hpp"
#include "oodforge/container.hpp"
#include "oodforge/dataio.hpp"
#include "oodforge/detectors.hpp"
#include "oodforge/error.hpp"
#include "oodforge/eval.hpp"
#include "oodforge/nnet.hpp"

namespace oodforge {

enum class Condition { baseline, cider };

struct RunConfig {
  Condition condition = Condition::baseline;
  std::string label;  // row tag; defaults to the condition name
  std::filesystem::path id_train, id_test;
  std::optional<std::filesystem::path> id_val;  // KLMatching fit; id_train when unset
  std::vector<std::filesystem::path> ood;
  std::vector<DetectorKind> detectors{std::begin(kAllDetectors), std::end(kAllDetectors)};
  DetectorParams params;
  TrainConfig probe;
  std::optional<CiderConfig> cider;
  std::uint64_t seed = 0;
  bool calibrate_on_val = false;
  bool balanced_accuracy = false;
  double tpr = 0.95;
  std::filesystem::path output_dir;

  std::string row_label() const {
    if (!label.empty()) return label;
    return condition == Condition::cider ? "cider" : "baseline";
  }

  std::vector<std::filesystem::path> input_files() const {
    std::vector<std::filesystem::path> files{id_train, id_test};
    if (id_val) files.push_back(*id_val);
    files.insert(files.end(), ood.begin(), ood.end());
    return files;
  }

  // Structural checks plus existence of every input file.
  void validate() const {
    if (id_train.empty()) throw ConfigError("run config: id_train is required");
    if (id_test.empty()) throw ConfigError("run config: id_test is required");
    if (ood.empty()) throw ConfigError("run config: at least one ood file is required");
    if (detectors.empty()) throw ConfigError("run config: detector list is empty");
    if (condition == Condition::cider && !cider) {
      throw ConfigError("run config: condition 'cider' requires a 'cider' section");
    }
    if (cider) cider->validate();
    probe.validate();
    params.odin.validate();
    if (!(params.energy_temperature > 0.0)) {
      throw ConfigError("run config: energy temperature must be > 0");
    }
    if (!(tpr > 0.0 && tpr <= 1.0)) throw ConfigError("run config: tpr must lie in (0, 1]");
    if (calibrate_on_val && !id_val) {
      throw ConfigError("run config: calibration on id_val requires id_val");
    }
    for (const auto& f : input_files()) {
      if (!std::filesystem::is_regular_file(f)) {
        throw ConfigError("run config: input file not found: " + f.string());
      }
    }
  }
};

namespace detail {

template <typename Json>
void reject_unknown(const Json& j, std::initializer_list<std::string_view> known,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
  }
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, std::uint64_t seed) {
  if (!j.is_object()) throw ConfigError("probe config must be a JSON object");
  reject_unknown(j, {"epochs", "batch_size", "learning_rate", "seed", "weight_decay"}, "probe");
  TrainConfig c;
  c.seed = seed;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  return c;
}

inline DetectorParams detector_params_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("detector_params must be a JSON object");
  reject_unknown(j, {"energy_temperature", "odin", "kl_mode", "openmax"}, "detector_params");
  DetectorParams p;
  p.energy_temperature = j.value("energy_temperature", p.energy_temperature);
  if (j.contains("odin")) {
    const auto& o = j.at("odin");
    reject_unknown(o, {"temperature", "epsilon", "mode"}, "detector_params.odin");
    p.odin.temperature = o.value("temperature", p.odin.temperature);
    p.odin.epsilon = o.value("epsilon", p.odin.epsilon);
    const std::string mode = o.value("mode", std::string("perturbed"));
    if (mode == "perturbed") {
      p.odin.mode = OdinMode::perturbed;
    } else if (mode == "difference") {
      p.odin.mode = OdinMode::difference;
    } else {
      throw ConfigError("detector_params.odin.mode must be 'perturbed' or 'difference'");
    }
  }
  const std::string kl = j.value("kl_mode", std::string("per_class"));
  if (kl == "per_class") {
    p.kl_mode = KlMode::per_class;
  } else if (kl == "global") {
    p.kl_mode = KlMode::global;
  } else {
    throw ConfigError("detector_params.kl_mode must be 'per_class' or 'global'");
  }
  if (j.contains("openmax")) {
    const auto& o = j.at("openmax");
    reject_unknown(o, {"tail", "alpha", "rank_offset"}, "detector_params.openmax");
    p.openmax_tail = o.value("tail", p.openmax_tail);
    p.openmax_alpha = o.value("alpha", p.openmax_alpha);
    const std::string off = o.value("rank_offset", std::string("inclusive"));
    if (off == "inclusive") {
      p.openmax_rank_offset = RankOffset::inclusive;
    } else if (off == "exclusive") {
      p.openmax_rank_offset = RankOffset::exclusive;
    } else {
      throw ConfigError("detector_params.openmax.rank_offset must be 'inclusive' or 'exclusive'");
    }
  }
  return p;
}

}  // namespace detail

// Relative paths are resolved against `base` (the config file's directory).
inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base = {}) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  try {
    detail::reject_unknown(j,
                           {"condition", "label", "id_train", "id_val", "id_test", "ood",
                            "detectors", "detector_params", "probe", "cider", "seed",
                            "calibration", "balanced", "tpr", "output_dir"},
                           "run config");
    const auto path = [&](const std::string& p) {
      const std::filesystem::path fp(p);
      return fp.is_absolute() || base.empty() ? fp : base / fp;
    };
    const std::string cond = j.value("condition", std::string("baseline"));
    if (cond == "baseline") {
      c.condition = Condition::baseline;
    } else if (cond == "cider") {
      c.condition = Condition::cider;
    } else {
      throw ConfigError("run config: condition must be 'baseline' or 'cider', got '" + cond + "'");
    }
    c.label = j.value("label", std::string());
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("id_train")) c.id_train = path(j.at("id_train").get<std::string>());
    if (j.contains("id_test")) c.id_test = path(j.at("id_test").get<std::string>());
    if (j.contains("id_val")) c.id_val = path(j.at("id_val").get<std::string>());
    if (j.contains("ood")) {
      const auto& o = j.at("ood");
      if (o.is_string()) {
        c.ood.push_back(path(o.get<std::string>()));
      } else {
        for (const auto& p : o) c.ood.push_back(path(p.get<std::string>()));
      }
    }
    if (j.contains("detectors")) {
      c.detectors.clear();
      for (const auto& d : j.at("detectors")) {
        const DetectorKind k = parse_detector(d.get<std::string>());
        if (std::find(c.detectors.begin(), c.detectors.end(), k) != c.detectors.end()) {
          throw ConfigError("run config: detector '" + d.get<std::string>() + "' listed twice");
        }
        c.detectors.push_back(k);
      }
    }
    if (j.contains("detector_params")) {
      c.params = detail::detector_params_from_json(j.at("detector_params"));
    }
    c.probe = detail::train_config_from_json(j.value("probe", nlohmann::json::object()), c.seed);
    if (j.contains("cider")) {
      nlohmann::json cj = j.at("cider");
      if (cj.is_object() && !cj.contains("seed")) cj["seed"] = c.seed;
      c.cider = cider_config_from_json(cj);
    }
    const std::string cal = j.value("calibration", std::string("id_test"));
    if (cal == "id_val") {
      c.calibrate_on_val = true;
    } else if (cal != "id_test") {
      throw ConfigError("run config: calibration must be 'id_test' or 'id_val'");
    }
    c.balanced_accuracy = j.value("balanced", false);
    c.tpr = j.value("tpr", 0.95);
    if (j.contains("output_dir")) c.output_dir = path(j.at("output_dir").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  } catch (const FormatError&) {
    throw ConfigError("cannot read config " + path.string());
  }
  return parse_run_config(j, path.parent_path());
}

// Evaluation parallelism: OOD_FORGE_THREADS if set (>= 1), else the
// hardware concurrency.
inline std::size_t evaluation_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("OOD_FORGE_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v < 1) throw ConfigError("OOD_FORGE_THREADS must be >= 1");
      n = static_cast<std::size_t>(v);
    } catch (const std::logic_error&) {
      throw ConfigError(std::string("OOD_FORGE_THREADS is not a number: ") + env);
    }
  }
  return n;
}

// Runs fn(0..count-1) on up to `threads` workers. Each index writes only its
// own result slot, so the outcome is independent of scheduling.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::min(threads, count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

struct RunResult {
  EvalReport report;
  LinearProbe probe;
  double id_accuracy = 0.0;
  std::optional<CiderModel> cider;
  std::vector<std::optional<FittedDetector>> detectors;  // config order; unset on fit failure
};

struct RunInputs {
  LabeledEmbeddings id_train, id_test;
  std::optional<LabeledEmbeddings> id_val;
  std::vector<LabeledEmbeddings> ood;
};

inline RunInputs load_inputs(const RunConfig& cfg) {
  RunInputs in;
  in.id_train = read_emb(cfg.id_train);
  in.id_test = read_emb(cfg.id_test);
  if (cfg.id_val) in.id_val = read_emb(*cfg.id_val);
  for (std::size_t k = 0; k < cfg.ood.size(); ++k) {
    in.ood.push_back(read_emb(cfg.ood[k]));
    if (in.ood.back().name.empty()) in.ood.back().name = cfg.ood[k].stem().string();
  }
  return in;
}

namespace detail {

inline std::string what_of(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const std::exception& ex) {
    return ex.what();
  }
}

}  // namespace detail

// Shared by both conditions once the detector features (probe inputs) are
// fixed: train the probe, fit detectors, score all cells.
inline RunResult run_on_features(const RunConfig& cfg, const RunInputs& raw,
                                 const FeatureFn& features) {
  raw.id_train.require_labels("run");
  const std::size_t d = raw.id_train.dim();
  if (raw.id_test.dim() != d) throw ConfigError("run: id_test dimension differs");
  if (raw.id_val && raw.id_val->dim() != d) throw ConfigError("run: id_val dimension differs");
  std::vector<std::string> names;
  for (const auto& o : raw.ood) {
    if (o.dim() != d) throw ConfigError("run: ood set '" + o.name + "' has a different dimension");
    if (std::find(names.begin(), names.end(), o.name) != names.end()) {
      throw ConfigError("run: two ood sets are named '" + o.name + "'");
    }
    names.push_back(o.name);
  }

  const LabeledEmbeddings train = map_rows(raw.id_train, features);
  const LabeledEmbeddings test = map_rows(raw.id_test, features);
  const LabeledEmbeddings val = raw.id_val ? map_rows(*raw.id_val, features) : train;
  std::vector<LabeledEmbeddings> ood;
  for (const auto& o : raw.ood) ood.push_back(map_rows(o, features));

  RunResult r;
  r.probe = train_probe(train, cfg.probe).probe;
  if (test.has_labels()) r.id_accuracy = probe_accuracy(r.probe, test);

  const Matrix train_logits = probe_logits(r.probe, train.features);
  const Matrix val_logits = probe_logits(r.probe, val.features);
  const FitInputs fit_in{&train, &train_logits, &val_logits};

  // Fit phase: one task per detector.
  const std::size_t threads = evaluation_threads();
  const std::size_t nd = cfg.detectors.size();
  r.detectors.resize(nd);
  std::vector<std::exception_ptr> fit_errors(nd);
  parallel_for(nd, threads, [&](std::size_t k) {
    try {
      r.detectors[k] = fit_detector(cfg.detectors[k], cfg.params, fit_in);
    } catch (const std::exception&) {
      fit_errors[k] = std::current_exception();
    }
  });

  // Score phase: one task per (detector, scored set); set 0 is ID test.
  std::vector<const LabeledEmbeddings*> sets{&test};
  for (const auto& o : ood) sets.push_back(&o);
  std::vector<Matrix> logits;
  for (const auto* s : sets) logits.push_back(probe_logits(r.probe, s->features));
  const std::size_t ns = sets.size();
  std::vector<Vector> scores(nd * ns);
  std::vector<std::exception_ptr> score_errors(nd * ns);
  parallel_for(nd * ns, threads, [&](std::size_t cell) {
    const std::size_t k = cell / ns, s = cell % ns;
    if (!r.detectors[k]) return;
    try {
      scores[cell] = score_detector(*r.detectors[k],
                                    ScoreInputs{&sets[s]->features, &logits[s], &r.probe});
      detail::require_finite(scores[cell], "scores");
    } catch (const std::exception&) {
      score_errors[cell] = std::current_exception();
    }
  });

  AccOptions acc;
  acc.tpr = cfg.tpr;
  acc.balanced = cfg.balanced_accuracy;
  const std::string label = cfg.row_label();
  for (std::size_t k = 0; k < nd; ++k) {
    const std::string det(detector_name(cfg.detectors[k]));
    std::optional<std::string> failure;
    acc.calibration.reset();
    if (fit_errors[k]) {
      failure = "fit: " + detail::what_of(fit_errors[k]);
    } else if (score_errors[k * ns]) {
      failure = test.name + ": " + detail::what_of(score_errors[k * ns]);
    }
    if (cfg.calibrate_on_val && !failure) {
      try {
        acc.calibration = score_detector(
            *r.detectors[k], ScoreInputs{&val.features, &val_logits, &r.probe});
      } catch (const std::exception& e) {
        failure = std::string("calibration: ") + e.what();
      }
    }
    for (std::size_t s = 1; s < ns; ++s) {
      ReportRow row{label, det, sets[s]->name, std::nullopt, std::nullopt, test.size(),
                    sets[s]->size()};
      std::optional<std::string> cell_failure = failure;
      if (!cell_failure && score_errors[k * ns + s]) {
        cell_failure = sets[s]->name + ": " + detail::what_of(score_errors[k * ns + s]);
      }
      if (!cell_failure) {
        const ScoredDataset sd{scores[k * ns], scores[k * ns + s], det, sets[s]->name, label};
        row = evaluate_scores(sd, acc);
      } else {
        r.report.errors.push_back(label + " / " + det + " / " + sets[s]->name + ": " +
                                  *cell_failure);
      }
      r.report.rows.push_back(std::move(row));
    }
  }
  return r;
}

inline RunResult run_baseline(const RunConfig& cfg, const RunInputs& in) {
  return run_on_features(cfg, in, [](std::span<const double> x) { return l2_normalize(x); });
}

inline RunResult run_cider(const RunConfig& cfg, const RunInputs& in) {
  if (!cfg.cider) throw ConfigError("run_cider: missing cider config");
  CiderModel model = cider_train(in.id_train, *cfg.cider).model;
  RunResult r = run_on_features(cfg, in, [&](std::span<const double> x) { return project(model, x); });
  r.cider = std::move(model);
  return r;
}

inline RunResult run_condition(const RunConfig& cfg, const RunInputs& in) {
  return cfg.condition == Condition::cider ? run_cider(cfg, in) : run_baseline(cfg, in);
}

inline std::string render_run_markdown(const RunConfig& cfg, const RunResult& r) {
  std::string out = "# OOD detection report (" + cfg.row_label() + ")\n\n";
  out += "In-domain probe accuracy: " + format_percent(r.id_accuracy) + "\n\n";
  out += render_markdown(r.report);
  return out;
}

// Writes report.csv, report.md and checkpoints into `dir`. Every file is
// staged next to its destination and renamed into place.
inline void write_run_outputs(const RunConfig& cfg, const RunResult& r,
                              const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "detectors");
  write_probe(dir / "probe.ckpt", r.probe);
  if (r.cider) write_cider(dir / "cider.ckpt", *r.cider);
  for (std::size_t k = 0; k < r.detectors.size(); ++k) {
    if (!r.detectors[k]) continue;
    write_detector(dir / "detectors" / (std::string(detector_name(cfg.detectors[k])) + ".state"),
                   *r.detectors[k]);
  }
  write_file_atomic(dir / "report.md", render_run_markdown(cfg, r));
  write_file_atomic(dir / "report.csv", render_csv(r.report));
}

// Validates, loads, runs and (when an output directory is known) writes.
inline RunResult run(const RunConfig& cfg) {
  cfg.validate();
  const RunInputs in = load_inputs(cfg);
  RunResult r = run_condition(cfg, in);
  if (!cfg.output_dir.empty()) write_run_outputs(cfg, r, cfg.output_dir);
  return r;
}

}  // namespace oodforge
