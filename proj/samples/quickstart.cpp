// Generates the separated synthetic scenario in a temporary directory, runs
// the baseline and CIDER conditions on it and prints the comparison table.

#include <cstdio>
#include <filesystem>

#include "oodforge/oodforge.hpp"

int main() {
  using namespace oodforge;
  const auto dir = std::filesystem::temp_directory_path() / "oodforge_quickstart";
  std::filesystem::create_directories(dir);

  SyntheticSpec spec;
  spec.seed = 7;
  const SyntheticData data = generate_synthetic(spec);
  write_emb(data.id_train, dir / "id_train.emb");
  write_emb(data.id_test, dir / "id_test.emb");
  write_emb(data.ood, dir / "ood.emb");

  RunConfig cfg;
  cfg.id_train = dir / "id_train.emb";
  cfg.id_test = dir / "id_test.emb";
  cfg.ood = {dir / "ood.emb"};
  cfg.seed = 7;
  cfg.probe.seed = 7;

  std::vector<EvalReport> reports;
  reports.push_back(run(cfg).report);

  cfg.condition = Condition::cider;
  CiderConfig cider;
  cider.projection_dim = 16;
  cider.epochs = 10;
  cider.seed = 7;
  cfg.cider = cider;
  reports.push_back(run(cfg).report);

  std::fputs(compare_conditions(reports).c_str(), stdout);
  std::filesystem::remove_all(dir);
  return 0;
}
