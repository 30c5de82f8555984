#include <cmath>

#include <gtest/gtest.h>

#include "oodforge/eval.hpp"
#include "support.hpp"

using namespace oodforge;
using namespace testing_support;

namespace {

double brute_auroc(const Vector& id, const Vector& ood) {
  double wins = 0;
  for (double a : id)
    for (double b : ood) wins += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
  return wins / (static_cast<double>(id.size()) * static_cast<double>(ood.size()));
}

// Integer-valued scores on a small range so ties are frequent.
Vector tied_scores(Rng& rng, std::size_t n) {
  Vector v(n);
  for (double& x : v) x = static_cast<double>(rng.below(8));
  return v;
}

ReportRow row(std::string cond, std::string det, std::string ds, double a, double c) {
  return {std::move(cond), std::move(det), std::move(ds), a, c, 10, 20};
}

}  // namespace

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(Vector{5, 6, 7}, Vector{1, 2}), 1.0);
  EXPECT_EQ(auroc(Vector{3, 2}, Vector{1, 2.5}), 0.75);
  EXPECT_EQ(auroc(Vector{5, 5, 5}, Vector{5, 5, 5}), 0.5);
  EXPECT_EQ(auroc(Vector{0}, Vector{1}), 0.0);
}

TEST(Auroc, MatchesBruteForceExactly) {
  Rng rng(101);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(50), m = 1 + rng.below(50);
    const bool ties = t % 2 == 0;
    const Vector id = ties ? tied_scores(rng, n) : random_vector(rng, n);
    const Vector ood = ties ? tied_scores(rng, m) : random_vector(rng, m);
    EXPECT_EQ(auroc(id, ood), brute_auroc(id, ood));
  }
}

TEST(Auroc, SwapIdentityAndMonotoneInvariance) {
  Rng rng(102);
  for (int t = 0; t < 200; ++t) {
    const Vector id = tied_scores(rng, 1 + rng.below(40));
    const Vector ood = tied_scores(rng, 1 + rng.below(40));
    // Exact on the half-integer pair counts; the final division rounds.
    const double pairs = static_cast<double>(id.size() * ood.size());
    EXPECT_EQ(std::round(auroc(ood, id) * pairs * 2.0) + std::round(auroc(id, ood) * pairs * 2.0),
              2.0 * pairs);
    EXPECT_NEAR(auroc(ood, id), 1.0 - auroc(id, ood), 1e-15);
    Vector ti = id, to = ood;
    for (double& x : ti) x = std::exp(0.7 * x) - 3.0;
    for (double& x : to) x = std::exp(0.7 * x) - 3.0;
    EXPECT_EQ(auroc(ti, to), auroc(id, ood));
  }
}

TEST(Auroc, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(auroc(Vector{}, Vector{1}), ConfigError);
  EXPECT_THROW(auroc(Vector{1}, Vector{NAN}), NumericalError);
  const ScoredDataset s{{}, {1.0}, "d", "x", "c"};
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(AccAtTpr, Examples) {
  EXPECT_EQ(acc_at_tpr(Vector(20, 1.0), Vector(30, 0.0)), 1.0);
  const Vector id{3, 1, 4, 1, 5, 9, 2, 6};
  const Vector ood{0, 10, 2};
  AccOptions all;
  all.tpr = 1.0;
  // t = min ID = 1: every ID accepted, OOD 0 rejected, 10 and 2 accepted.
  EXPECT_DOUBLE_EQ(acc_at_tpr(id, ood, all), (8.0 + 1.0) / 11.0);
}

TEST(AccAtTpr, IdenticalDistributionsStatisticalOracle) {
  Rng rng(103);
  const Vector id = random_vector(rng, 10000), ood = random_vector(rng, 10000);
  const double expected = (0.95 * 10000 + 0.05 * 10000) / 20000;
  EXPECT_NEAR(acc_at_tpr(id, ood), expected, 0.03);
}

TEST(AccAtTpr, RangeAndAchievedTpr) {
  Rng rng(104);
  for (int t = 0; t < 200; ++t) {
    const Vector id = t % 2 ? tied_scores(rng, 1 + rng.below(60)) : random_vector(rng, 1 + rng.below(60));
    const Vector ood = random_vector(rng, 1 + rng.below(60));
    const double tpr = rng.uniform(0.5, 1.0);
    AccOptions opt;
    opt.tpr = tpr;
    const double a = acc_at_tpr(id, ood, opt);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
    const double t_id = percentile_nearest_rank(id, 1.0 - tpr);
    std::size_t accepted = 0;
    for (double s : id) accepted += s >= t_id;
    EXPECT_GE(static_cast<double>(accepted), tpr * static_cast<double>(id.size()) - 1e-9);
  }
}

TEST(AccAtTpr, BalancedAndCalibration) {
  const Vector id{1, 2, 3, 4}, ood{0, 0, 0, 0, 0, 0, 0, 5};
  AccOptions b;
  b.balanced = true;
  b.tpr = 1.0;
  EXPECT_DOUBLE_EQ(acc_at_tpr(id, ood, b), 0.5 * (1.0 + 7.0 / 8.0));
  AccOptions cal;
  cal.tpr = 1.0;
  cal.calibration = Vector{2.5, 9};
  // t = 2.5: ID 3,4 accepted; OOD all but 5 rejected.
  EXPECT_DOUBLE_EQ(acc_at_tpr(id, ood, cal), (2.0 + 7.0) / 12.0);
}

TEST(Report, PercentFormattingAndEmptyReport) {
  EvalReport r;
  EXPECT_EQ(render_csv(r), std::string(kCsvHeader) + "\n");
  EXPECT_EQ(render_markdown(r), "| Detector |\n|---|\n");
  r.rows.push_back(row("baseline", "MaxSoftmax", "SVHN-synthetic", 0.9312, 0.8745));
  const std::string md = render_report(r, ReportFormat::markdown);
  EXPECT_NE(md.find("| MaxSoftmax | 93.12 | 87.45 |"), std::string::npos);
  EXPECT_NE(md.find("baseline / SVHN-synthetic AUROC ↑"), std::string::npos);
  EXPECT_NE(md.find("ACC95TPR ↑"), std::string::npos);
  EXPECT_EQ(format_percent(0.5), "50.00");
  EXPECT_EQ(format_percent(1.0), "100.00");
}

TEST(Report, CsvRoundTripIsIdentity) {
  Rng rng(105);
  EvalReport r;
  for (int t = 0; t < 50; ++t) r.rows.push_back(row("c" + std::to_string(t % 3), "D", "set", rng.uniform(), rng.uniform()));
  r.rows.push_back({"c0", "OpenMax", "set", std::nullopt, std::nullopt, 3, 4});
  const std::string csv = render_report(r, ReportFormat::csv);
  const EvalReport back = parse_report_csv(csv);
  EXPECT_EQ(back.rows, r.rows);
  EXPECT_EQ(render_csv(back), csv);
  EXPECT_NE(csv.find(",,,3,4,error"), std::string::npos);
}

TEST(Report, CsvParserRejectsMalformedInput) {
  EXPECT_THROW(parse_report_csv("a,b\n"), FormatError);
  EXPECT_THROW(parse_report_csv(std::string(kCsvHeader) + "\nx,y,z,0.5,0.5,1,1\n"), FormatError);
  EXPECT_THROW(parse_report_csv(std::string(kCsvHeader) + "\nx,y,z,0.5,0.5,1,1,maybe\n"), FormatError);
  EvalReport bad;
  bad.rows.push_back(row("a,b", "D", "s", 0.5, 0.5));
  EXPECT_THROW(render_csv(bad), ConfigError);
}

TEST(Report, ErrorRowsRenderAsErrorCells) {
  EvalReport r;
  r.rows.push_back(row("baseline", "MaxLogit", "ood", 0.8, 0.7));
  r.rows.push_back({"baseline", "OpenMax", "ood", std::nullopt, std::nullopt, 10, 20});
  r.errors.push_back("baseline / OpenMax: degenerate tail");
  const std::string md = render_markdown(r);
  EXPECT_NE(md.find("| OpenMax | error | error |"), std::string::npos);
  EXPECT_NE(md.find("- baseline / OpenMax: degenerate tail"), std::string::npos);
}

TEST(Compare, BoldsBestAndFirstConditionWinsTies) {
  EvalReport a, b;
  a.rows = {row("baseline", "Mahalanobis", "ood", 0.40, 0.50), row("baseline", "MaxLogit", "ood", 0.9, 0.8)};
  b.rows = {row("cider", "Mahalanobis", "ood", 0.95, 0.90), row("cider", "MaxLogit", "ood", 0.9, 0.8)};
  const std::string md = compare_conditions({a, b});
  EXPECT_NE(md.find("### ood"), std::string::npos);
  EXPECT_NE(md.find("| Mahalanobis | 40.00 | **95.00** | 50.00 | **90.00** |"), std::string::npos);
  EXPECT_NE(md.find("| MaxLogit | **90.00** | 90.00 | **80.00** | 80.00 |"), std::string::npos);

  EvalReport same = a;
  for (auto& r : same.rows) r.condition = "again";
  EXPECT_NE(compare_conditions({a, same}).find("| MaxLogit | **90.00** | 90.00 |"), std::string::npos);
}

TEST(Compare, AxisMismatchListsMissingCells) {
  EvalReport a, b;
  a.rows = {row("baseline", "MaxLogit", "svhn", 0.9, 0.8)};
  b.rows = {row("cider", "MaxLogit", "cifar", 0.9, 0.8)};
  try {
    compare_conditions({a, b});
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("baseline/MaxLogit/cifar"), std::string::npos);
    EXPECT_NE(msg.find("cider/MaxLogit/svhn"), std::string::npos);
  }
}
