// ood-forge: command-line front end. Exit codes: 0 success, 2 invalid
// configuration, 3 malformed data file, 4 numerical failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "oodforge/oodforge.hpp"

namespace fs = std::filesystem;
using namespace oodforge;

namespace {

nlohmann::json load_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  } catch (const FormatError&) {
    throw ConfigError("cannot read " + path.string());
  }
}

void write_text(const std::optional<fs::path>& out, const std::string& text) {
  if (out) {
    write_file_atomic(*out, text);
  } else {
    std::cout << text;
  }
}

// {"kind": "separated" | "overlapping", ...generator fields}
SyntheticData generate_from_spec(nlohmann::json j, std::optional<std::uint64_t> seed) {
  if (!j.is_object()) throw ConfigError("synthetic spec must be a JSON object");
  if (seed) j["seed"] = *seed;
  const std::string kind = j.value("kind", std::string("separated"));
  try {
    if (kind == "separated") {
      detail::reject_unknown(j, {"kind", "classes", "dim", "per_class", "noise_sigma", "ood_shift",
                                 "seed"}, "synthetic spec");
      SyntheticSpec s;
      s.classes = j.value("classes", s.classes);
      s.dim = j.value("dim", s.dim);
      s.per_class = j.value("per_class", s.per_class);
      s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
      s.ood_shift = j.value("ood_shift", s.ood_shift);
      s.seed = j.value("seed", s.seed);
      return generate_synthetic(s);
    }
    if (kind == "overlapping") {
      detail::reject_unknown(j, {"kind", "classes", "dim", "per_class", "noise_sigma", "spread",
                                 "shared", "seed"}, "synthetic spec");
      OverlapSpec s;
      s.classes = j.value("classes", s.classes);
      s.dim = j.value("dim", s.dim);
      s.per_class = j.value("per_class", s.per_class);
      s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
      s.spread = j.value("spread", s.spread);
      s.shared = j.value("shared", s.shared);
      s.seed = j.value("seed", s.seed);
      return generate_overlapping(s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  }
  throw ConfigError("synthetic spec: kind must be 'separated' or 'overlapping', got '" + kind + "'");
}

// Probe inputs: the CIDER projection when a checkpoint is given, otherwise
// the l2-normalised embedding.
FeatureFn feature_map(const std::optional<fs::path>& cider_path) {
  if (!cider_path) return [](std::span<const double> x) { return l2_normalize(x); };
  auto model = std::make_shared<CiderModel>(read_cider(*cider_path));
  return [model](std::span<const double> x) { return project(*model, x); };
}

int run_guarded(const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Out-of-distribution detection on classifier embeddings"};
  app.require_subcommand(1);

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "Write synthetic id_train/id_test/ood EMB1 files");
  fs::path gen_spec, gen_out;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--spec", gen_spec, "Generator spec JSON")->required();
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Override the spec seed");

  // probe-train
  auto* pt = app.add_subcommand("probe-train", "Train a linear probe on normalised embeddings");
  fs::path pt_train, pt_out;
  std::optional<fs::path> pt_config, pt_cider;
  std::optional<std::uint64_t> pt_seed;
  pt->add_option("--train", pt_train, "Labeled EMB1 training file")->required();
  pt->add_option("--out", pt_out, "Probe checkpoint to write")->required();
  pt->add_option("--config", pt_config, "Training config JSON");
  pt->add_option("--cider", pt_cider, "Train on this CIDER checkpoint's projection");
  pt->add_option("--seed", pt_seed, "Training seed");

  // cider-train
  auto* ct = app.add_subcommand("cider-train", "Train a CIDER projection head");
  fs::path ct_train, ct_out;
  std::optional<fs::path> ct_config;
  std::optional<std::uint64_t> ct_seed;
  ct->add_option("--train", ct_train, "Labeled EMB1 training file")->required();
  ct->add_option("--out", ct_out, "CIDER checkpoint to write")->required();
  ct->add_option("--config", ct_config, "CIDER config JSON");
  ct->add_option("--seed", ct_seed, "Training seed");

  // fit
  auto* fit = app.add_subcommand("fit", "Fit one detector and write its state");
  std::string fit_method;
  fs::path fit_train, fit_probe, fit_out;
  std::optional<fs::path> fit_val, fit_cider, fit_params;
  fit->add_option("--method", fit_method, "Detector name")->required();
  fit->add_option("--train", fit_train, "Labeled EMB1 training file")->required();
  fit->add_option("--probe", fit_probe, "Probe checkpoint")->required();
  fit->add_option("--val", fit_val, "Validation EMB1 file (KLMatching)");
  fit->add_option("--cider", fit_cider, "CIDER checkpoint defining the features");
  fit->add_option("--params", fit_params, "Detector parameter JSON");
  fit->add_option("--out", fit_out, "Detector state to write")->required();

  // score
  auto* sc = app.add_subcommand("score", "Score an EMB1 file with a fitted detector");
  fs::path sc_state, sc_probe, sc_data, sc_out;
  std::optional<fs::path> sc_cider;
  sc->add_option("--state", sc_state, "Detector state")->required();
  sc->add_option("--probe", sc_probe, "Probe checkpoint")->required();
  sc->add_option("--cider", sc_cider, "CIDER checkpoint defining the features");
  sc->add_option("--data", sc_data, "EMB1 file to score")->required();
  sc->add_option("--out", sc_out, "Scores as an N x 1 EMB1 file")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "AUROC and ACC@TPR from two score files");
  fs::path ev_id, ev_ood;
  std::string ev_detector = "detector", ev_condition = "baseline";
  std::optional<fs::path> ev_out;
  ev->add_option("--id", ev_id, "ID score file")->required();
  ev->add_option("--ood", ev_ood, "OOD score file")->required();
  ev->add_option("--detector", ev_detector, "Detector label for the report row");
  ev->add_option("--condition", ev_condition, "Condition label for the report row");
  ev->add_option("--out", ev_out, "Report CSV to write (stdout when omitted)");

  // report
  auto* rp = app.add_subcommand("report", "Render report CSVs as markdown");
  std::vector<fs::path> rp_csv;
  std::optional<fs::path> rp_out;
  rp->add_option("--csv", rp_csv, "Report CSV; several are compared side by side")->required();
  rp->add_option("--out", rp_out, "Markdown file to write (stdout when omitted)");

  // run
  auto* rn = app.add_subcommand("run", "Run a full condition from a JSON config");
  fs::path rn_config;
  std::optional<fs::path> rn_out;
  std::optional<std::uint64_t> rn_seed;
  bool rn_check = false;
  rn->add_option("--config", rn_config, "Run config JSON")->required();
  rn->add_option("--out", rn_out, "Output directory (overrides output_dir)");
  rn->add_option("--seed", rn_seed, "Override the top-level seed");
  rn->add_flag("--check", rn_check, "Validate the config and inputs, then exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  return run_guarded([&] {
    if (*gen) {
      const SyntheticData d = generate_from_spec(load_json(gen_spec), gen_seed);
      fs::create_directories(gen_out);
      write_emb(d.id_train, gen_out / "id_train.emb");
      write_emb(d.id_test, gen_out / "id_test.emb");
      write_emb(d.ood, gen_out / "ood.emb");
    } else if (*pt) {
      TrainConfig cfg = pt_config ? detail::train_config_from_json(load_json(*pt_config), 0)
                                  : TrainConfig{};
      if (pt_seed) cfg.seed = *pt_seed;
      const LabeledEmbeddings train = read_emb(pt_train);
      const auto result = train_probe(train, cfg, feature_map(pt_cider));
      write_probe(pt_out, result.probe);
      std::printf("final loss %.6f\n", result.epoch_loss.back());
    } else if (*ct) {
      nlohmann::json j = ct_config ? load_json(*ct_config) : nlohmann::json::object();
      if (ct_seed) j["seed"] = *ct_seed;
      const CiderConfig cfg = cider_config_from_json(j);
      const auto result = cider_train(read_emb(ct_train), cfg);
      write_cider(ct_out, result.model);
      if (!result.epoch_loss.empty()) std::printf("final loss %.6f\n", result.epoch_loss.back());
    } else if (*fit) {
      const DetectorKind kind = parse_detector(fit_method);
      const DetectorParams params = fit_params
                                        ? detail::detector_params_from_json(load_json(*fit_params))
                                        : DetectorParams{};
      const LinearProbe probe = read_probe(fit_probe);
      const FeatureFn f = feature_map(fit_cider);
      const LabeledEmbeddings train = map_rows(read_emb(fit_train), f);
      const LabeledEmbeddings val = fit_val ? map_rows(read_emb(*fit_val), f) : train;
      const Matrix train_logits = probe_logits(probe, train.features);
      const Matrix val_logits = probe_logits(probe, val.features);
      write_detector(fit_out, fit_detector(kind, params, {&train, &train_logits, &val_logits}));
    } else if (*sc) {
      const FittedDetector det = read_detector(sc_state);
      const LinearProbe probe = read_probe(sc_probe);
      const LabeledEmbeddings data = map_rows(read_emb(sc_data), feature_map(sc_cider));
      const Matrix logits = probe_logits(probe, data.features);
      const Vector s = score_detector(det, {&data.features, &logits, &probe});
      write_emb({Matrix(s.size(), 1, s), std::nullopt, data.name, data.split}, sc_out);
    } else if (*ev) {
      const LabeledEmbeddings id = read_emb(ev_id), ood = read_emb(ev_ood);
      if (id.dim() != 1 || ood.dim() != 1) throw FormatError("score files must have d = 1");
      const ScoredDataset s{as_vector(id.features), as_vector(ood.features), ev_detector,
                            ood.name, ev_condition};
      write_text(ev_out, render_csv({{evaluate_scores(s)}, {}}));
    } else if (*rp) {
      std::vector<EvalReport> reports;
      for (const auto& p : rp_csv) reports.push_back(parse_report_csv(read_file_bytes(p)));
      write_text(rp_out, reports.size() == 1 ? render_markdown(reports.front())
                                             : compare_conditions(reports));
    } else if (*rn) {
      nlohmann::json j = load_json(rn_config);
      if (rn_seed && j.is_object()) j["seed"] = *rn_seed;
      RunConfig cfg = parse_run_config(j, rn_config.parent_path());
      if (rn_out) cfg.output_dir = *rn_out;
      if (cfg.output_dir.empty()) throw ConfigError("run: no output directory (--out)");
      cfg.validate();
      if (rn_check) {
        std::printf("config ok\n");
        return;
      }
      const RunResult r = run(cfg);
      std::cout << render_csv(r.report);
      for (const auto& e : r.report.errors) std::cerr << "detector error: " << e << "\n";
    }
  });
}
