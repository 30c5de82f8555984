#pragma once

// Detection metrics (AUROC, accuracy at a fixed true positive rate) and the
// result tables built from them. ID is the positive class throughout.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "oodforge/error.hpp"
#include "oodforge/numerics.hpp"

namespace oodforge {

namespace detail {

inline void require_scores(std::span<const double> id, std::span<const double> ood) {
  if (id.empty() || ood.empty()) {
    throw ConfigError("scored dataset: both score lists must be non-empty");
  }
  require_finite(id, "id scores");
  require_finite(ood, "ood scores");
}

}  // namespace detail

struct ScoredDataset {
  Vector id_scores;
  Vector ood_scores;
  std::string detector;
  std::string dataset;
  std::string condition;

  void validate() const { detail::require_scores(id_scores, ood_scores); }
};

// Mann-Whitney statistic via midranks: ranks are averaged over ties, then
//   AUROC = (R_id - n_id (n_id + 1) / 2) / (n_id n_ood).
// All intermediate values are multiples of 1/2, so the result is exactly the
// pairwise count (wins + ties / 2) / (n_id n_ood).
inline double auroc(std::span<const double> id, std::span<const double> ood) {
  detail::require_scores(id, ood);
  std::vector<std::pair<double, bool>> all;
  all.reserve(id.size() + ood.size());
  for (double s : id) all.emplace_back(s, true);
  for (double s : ood) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::size_t ids = 0;
    while (j < all.size() && all[j].first == all[i].first) ids += all[j++].second ? 1 : 0;
    // ranks i+1..j share the midrank (i + 1 + j) / 2
    rank_sum += static_cast<double>(ids) * 0.5 * static_cast<double>(i + 1 + j);
    i = j;
  }
  const double n_id = static_cast<double>(id.size());
  const double n_ood = static_cast<double>(ood.size());
  return (rank_sum - n_id * (n_id + 1.0) / 2.0) / (n_id * n_ood);
}

inline double auroc(const ScoredDataset& s) { return auroc(s.id_scores, s.ood_scores); }

struct AccOptions {
  double tpr = 0.95;
  // Mean of the ID and OOD accuracies instead of the pooled fraction.
  bool balanced = false;
  // Scores defining the threshold; the ID test scores when empty.
  std::optional<Vector> calibration;
};

// Threshold t = percentile_nearest_rank(reference ID scores, 1 - tpr);
// predict ID iff score >= t.
inline double acc_at_tpr(std::span<const double> id, std::span<const double> ood,
                         const AccOptions& opt = {}) {
  detail::require_scores(id, ood);
  if (!(opt.tpr >= 0.0 && opt.tpr <= 1.0)) throw ConfigError("acc_at_tpr: tpr must lie in [0, 1]");
  const std::span<const double> ref =
      opt.calibration ? std::span<const double>(*opt.calibration) : id;
  const double t = percentile_nearest_rank(ref, 1.0 - opt.tpr);
  const auto id_ok = static_cast<double>(std::count_if(id.begin(), id.end(),
                                                       [&](double s) { return s >= t; }));
  const auto ood_ok = static_cast<double>(std::count_if(ood.begin(), ood.end(),
                                                        [&](double s) { return s < t; }));
  const double n_id = static_cast<double>(id.size());
  const double n_ood = static_cast<double>(ood.size());
  if (opt.balanced) return 0.5 * (id_ok / n_id + ood_ok / n_ood);
  return (id_ok + ood_ok) / (n_id + n_ood);
}

inline double acc_at_tpr(const ScoredDataset& s, const AccOptions& opt = {}) {
  return acc_at_tpr(s.id_scores, s.ood_scores, opt);
}

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
  std::string condition;
  std::string detector;
  std::string dataset;
  std::optional<double> auroc;     // unset when the detector failed
  std::optional<double> acc95tpr;
  std::size_t n_id = 0;
  std::size_t n_ood = 0;

  bool ok() const { return auroc.has_value(); }

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  // Human-readable failure messages, rendered in markdown only.
  std::vector<std::string> errors;
};

inline ReportRow evaluate_scores(const ScoredDataset& s, const AccOptions& opt = {}) {
  return {s.condition, s.detector, s.dataset, auroc(s), acc_at_tpr(s, opt),
          s.id_scores.size(), s.ood_scores.size()};
}

inline std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * fraction);
  return buf;
}

// Shortest decimal form that parses back to the same double.
inline std::string format_exact(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline constexpr std::string_view kCsvHeader =
    "condition,detector,dataset,auroc,acc95tpr,n_id,n_ood,status";

namespace detail {

inline void require_csv_safe(const std::string& field) {
  if (field.find_first_of(",\n\r\"") != std::string::npos) {
    throw ConfigError("report field '" + field + "' contains a CSV delimiter");
  }
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.emplace_back(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("report: bad number '" + s + "'");
  }
  return v;
}

inline std::size_t parse_count(const std::string& s) {
  std::size_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("report: bad count '" + s + "'");
  }
  return v;
}

}  // namespace detail

// One line per row in a fixed column order. Metrics are fractions written
// in shortest round-trip form; failed rows leave them empty with
// status=error.
inline std::string render_csv(const EvalReport& r) {
  std::string out(kCsvHeader);
  out.push_back('\n');
  for (const auto& row : r.rows) {
    for (const auto* f : {&row.condition, &row.detector, &row.dataset}) {
      detail::require_csv_safe(*f);
      out += *f;
      out.push_back(',');
    }
    out += row.auroc ? format_exact(*row.auroc) : "";
    out.push_back(',');
    out += row.acc95tpr ? format_exact(*row.acc95tpr) : "";
    out += "," + std::to_string(row.n_id) + "," + std::to_string(row.n_ood) + ",";
    out += row.ok() ? "ok" : "error";
    out.push_back('\n');
  }
  return out;
}

inline EvalReport parse_report_csv(std::string_view text) {
  EvalReport r;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) {
    throw FormatError("report: unexpected CSV header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 8) throw FormatError("report: expected 8 columns in '" + line + "'");
    ReportRow row{f[0], f[1], f[2], std::nullopt, std::nullopt,
                  detail::parse_count(f[5]), detail::parse_count(f[6])};
    if (f[7] == "ok") {
      row.auroc = detail::parse_double(f[3]);
      row.acc95tpr = detail::parse_double(f[4]);
    } else if (f[7] != "error") {
      throw FormatError("report: unknown status '" + f[7] + "'");
    }
    r.rows.push_back(std::move(row));
  }
  return r;
}

namespace detail {

template <typename T>
std::vector<T> first_seen(const std::vector<ReportRow>& rows, T (*key)(const ReportRow&)) {
  std::vector<T> out;
  for (const auto& row : rows) {
    T k = key(row);
    if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(std::move(k));
  }
  return out;
}

inline std::string row_detector(const ReportRow& r) { return r.detector; }
inline std::string row_condition(const ReportRow& r) { return r.condition; }
inline std::string row_dataset(const ReportRow& r) { return r.dataset; }
inline std::pair<std::string, std::string> row_column(const ReportRow& r) {
  return {r.condition, r.dataset};
}

inline const ReportRow* find_row(const std::vector<ReportRow>& rows, const std::string& condition,
                                 const std::string& detector, const std::string& dataset) {
  for (const auto& r : rows)
    if (r.condition == condition && r.detector == detector && r.dataset == dataset) return &r;
  return nullptr;
}

inline std::string cell(const ReportRow* r, bool auroc_column) {
  if (!r) return "-";
  if (!r->ok()) return "error";
  return format_percent(auroc_column ? *r->auroc : *r->acc95tpr);
}

}  // namespace detail

// Detectors down the side; one AUROC and one ACC95TPR column per
// (condition, dataset), in order of first appearance. Percent, 2 decimals.
inline std::string render_markdown(const EvalReport& r) {
  const auto detectors = detail::first_seen(r.rows, &detail::row_detector);
  const auto columns = detail::first_seen(r.rows, &detail::row_column);
  std::string out = "| Detector |";
  std::string rule = "|---|";
  for (const auto& [condition, dataset] : columns) {
    out += " " + condition + " / " + dataset + " AUROC ↑ | " + condition + " / " + dataset +
           " ACC95TPR ↑ |";
    rule += "---:|---:|";
  }
  out += "\n" + rule + "\n";
  for (const auto& det : detectors) {
    out += "| " + det + " |";
    for (const auto& [condition, dataset] : columns) {
      const ReportRow* row = detail::find_row(r.rows, condition, det, dataset);
      out += " " + detail::cell(row, true) + " | " + detail::cell(row, false) + " |";
    }
    out += "\n";
  }
  if (!r.errors.empty()) {
    out += "\nErrors:\n\n";
    for (const auto& e : r.errors) out += "- " + e + "\n";
  }
  return out;
}

enum class ReportFormat { markdown, csv };

inline std::string render_report(const EvalReport& r, ReportFormat format) {
  return format == ReportFormat::csv ? render_csv(r) : render_markdown(r);
}

// Side-by-side comparison of conditions, one table per dataset, with the
// best value of each metric per detector in bold. Ties go to the condition
// listed first. Every condition must cover the same (detector, dataset)
// cells.
inline std::string compare_conditions(const std::vector<EvalReport>& reports) {
  std::vector<ReportRow> rows;
  for (const auto& r : reports) rows.insert(rows.end(), r.rows.begin(), r.rows.end());
  const auto conditions = detail::first_seen(rows, &detail::row_condition);
  const auto detectors = detail::first_seen(rows, &detail::row_detector);
  const auto datasets = detail::first_seen(rows, &detail::row_dataset);

  std::set<std::pair<std::string, std::string>> cells;
  for (const auto& row : rows) cells.emplace(row.detector, row.dataset);
  std::vector<std::string> missing;
  for (const auto& c : conditions)
    for (const auto& [det, ds] : cells)
      if (!detail::find_row(rows, c, det, ds)) missing.push_back(c + "/" + det + "/" + ds);
  if (!missing.empty()) {
    std::string msg = "compare_conditions: axes differ; missing cells:";
    for (const auto& m : missing) msg += " " + m;
    throw ConfigError(msg);
  }

  std::string out;
  for (const auto& ds : datasets) {
    if (!out.empty()) out += "\n";
    out += "### " + ds + "\n\n| Detector |";
    std::string rule = "|---|";
    for (const char* metric : {"AUROC", "ACC95TPR"}) {
      for (const auto& c : conditions) {
        out += std::string(" ") + c + " " + metric + " ↑ |";
        rule += "---:|";
      }
    }
    out += "\n" + rule + "\n";
    for (const auto& det : detectors) {
      if (!cells.count({det, ds})) continue;
      out += "| " + det + " |";
      for (bool auroc_column : {true, false}) {
        std::optional<std::size_t> best;
        double best_value = 0.0;
        for (std::size_t k = 0; k < conditions.size(); ++k) {
          const ReportRow* row = detail::find_row(rows, conditions[k], det, ds);
          if (!row->ok()) continue;
          const double v = auroc_column ? *row->auroc : *row->acc95tpr;
          if (!best || v > best_value) {
            best = k;
            best_value = v;
          }
        }
        for (std::size_t k = 0; k < conditions.size(); ++k) {
          const std::string v =
              detail::cell(detail::find_row(rows, conditions[k], det, ds), auroc_column);
          out += best == k ? " **" + v + "** |" : " " + v + " |";
        }
      }
      out += "\n";
    }
  }
  return out;
}

}  // namespace oodforge
