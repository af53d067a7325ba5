// End-to-end exercise of the command-line pipeline in a scratch workspace.
// The path to the orient binary arrives as argv[1] (set by CTest).

#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "orient/geometry.hpp"
#include "orient/graph.hpp"
#include "orient/projector.hpp"
#include "orient/volume.hpp"

namespace fs = std::filesystem;

namespace {

std::string g_binary;
std::string g_workspace;

int run(const std::string& args) {
  const std::string cmd =
      "ORIENT_WORKSPACE=" + g_workspace + " " + g_binary + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string run_capture(const std::string& args) {
  const std::string out_path = g_workspace + "/cmd_output.txt";
  const std::string cmd = "ORIENT_WORKSPACE=" + g_workspace + " " + g_binary + " " + args + " >" +
                          out_path + " 2>&1";
  std::system(cmd.c_str());
  std::ifstream in(out_path);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return content;
}

std::string ws(const std::string& rel) { return g_workspace + "/" + rel; }

}  // namespace

TEST_CASE("pipeline end to end") {
  REQUIRE(run("phantom --kind asymmetric-blobs --size 16 --seed 1 --out vol") == 0);
  CHECK(fs::exists(ws("vol.raw")));
  CHECK(fs::exists(ws("vol.json")));
  CHECK(fs::exists(ws("vol.raw.manifest.json")));

  REQUIRE(run("project --volume vol --count 120 --out stack --truth truth.csv --seed 7") == 0);
  auto stack = orient::load_stack(ws("stack"));
  CHECK(stack.count == 120);

  REQUIRE(run("split --count 120 --train 0.5 --val 0.25 --test 0.25 --out splits.json") == 0);
  REQUIRE(run("pairs --truth truth.csv --split splits.json --subset train --fraction 0.4 "
              "--out train_pairs.csv") == 0);
  REQUIRE(run("pairs --truth truth.csv --split splits.json --subset val --fraction 0.4 "
              "--out val_pairs.csv") == 0);
  REQUIRE(run("train --stack stack --pairs train_pairs.csv --val-pairs val_pairs.csv "
              "--epochs 2 --feature-dim 16 --out model.bin --history history.csv "
              "--threads 2") == 0);
  CHECK(fs::exists(ws("model.bin")));

  REQUIRE(run("estimate --stack stack --pairs train_pairs.csv --model model.bin "
              "--out graph_siamese.csv") == 0);
  REQUIRE(run("estimate --stack stack --pairs train_pairs.csv --estimator euclidean "
              "--out graph_base.csv") == 0);

  // recovery on the exact graph reproduces the zero-loss regime end to end
  {
    auto truth = orient::load_ground_truth_csv(ws("truth.csv"));
    std::vector<orient::UnitQuaternion> qs;
    for (const auto& r : truth) qs.push_back(r.orientation);
    orient::save_graph_csv(ws("graph_exact.csv"), orient::exact_distance_graph(qs));
  }
  REQUIRE(run("recover --graph graph_exact.csv --out recovered.csv --trace trace.json "
              "--max-steps 8000") == 0);
  REQUIRE(run("align --truth truth.csv --estimate recovered.csv --out align.json "
              "--aligned-out aligned.csv") == 0);
  const auto align_json = orient::detail::load_json_file(ws("align.json"));
  CHECK(align_json.at("e_or").get<double>() < 0.05);

  REQUIRE(run("reconstruct --stack stack --orientations aligned.csv --iterations 12 "
              "--out recon --threads 2") == 0);
  REQUIRE(run("fsc --a recon --b vol --shells 8 --out fsc.csv --summary fsc.json") == 0);
  const auto fsc_json = orient::detail::load_json_file(ws("fsc.json"));
  CHECK(fsc_json.contains("resolution_at_threshold"));

  REQUIRE(run("report --out report.json") == 0);
  const auto report = orient::detail::load_json_file(ws("report.json"));
  CHECK(report.at("stages").size() >= 9);
  bool saw_align_metric = false;
  for (const auto& stage : report.at("stages"))
    if (stage.at("metrics").contains("e_or")) saw_align_metric = true;
  CHECK(saw_align_metric);
}

TEST_CASE("stage re-runs are no-ops without --force") {
  const std::string first = run_capture("phantom --kind blobs --size 16 --seed 3 --out vol2");
  CHECK(first.find("done") != std::string::npos);
  const std::string second = run_capture("phantom --kind blobs --size 16 --seed 3 --out vol2");
  CHECK(second.find("up-to-date") != std::string::npos);
  // parameter change invalidates the manifest
  const std::string third = run_capture("phantom --kind blobs --size 16 --seed 4 --out vol2");
  CHECK(third.find("done") != std::string::npos);
  const std::string forced = run_capture("phantom --kind blobs --size 16 --seed 4 --out vol2 --force");
  CHECK(forced.find("done") != std::string::npos);
}

TEST_CASE("validation failures exit with code 2") {
  CHECK(run("phantom --kind bogus --size 16 --out bad") == 2);
  CHECK(run("phantom --kind blobs --size 4 --out bad") == 2);
  CHECK(run("fsc --a nowhere --b nowhere2 --out x.csv --summary x.json") == 2);
  CHECK(run("estimate --stack stack --pairs train_pairs.csv --estimator siamese "
            "--out x.csv") == 2);  // missing --model
  CHECK(run("definitely-not-a-subcommand") != 0);
}

TEST_CASE("config document: defaults, overrides, unknown keys") {
  {
    std::ofstream cfg(ws("good_config.json"));
    cfg << R"({"schema_version": 1, "phantom": {"kind": "shell", "size": 16, "seed": 11}})";
  }
  REQUIRE(run("--config good_config.json phantom --out vol_cfg") == 0);
  auto vol = orient::load_volume(ws("vol_cfg"));
  CHECK(vol.nx == 16);

  // flag overrides config value
  REQUIRE(run("--config good_config.json phantom --size 24 --out vol_cfg2") == 0);
  CHECK(orient::load_volume(ws("vol_cfg2")).nx == 24);

  {
    std::ofstream cfg(ws("bad_key.json"));
    cfg << R"({"schema_version": 1, "phantom": {"kindd": "shell"}})";
  }
  CHECK(run("--config bad_key.json phantom --out x") == 2);

  {
    std::ofstream cfg(ws("bad_version.json"));
    cfg << R"({"schema_version": 99, "phantom": {"kind": "shell"}})";
  }
  CHECK(run("--config bad_version.json phantom --out x") == 2);
}

TEST_CASE("perturbation sweep emits tidy CSV") {
  REQUIRE(run("sweep --mode perturb --levels 0,0.4 --seeds 1 --count 120 --out sweep.csv") == 0);
  std::ifstream in(ws("sweep.csv"));
  std::string header;
  std::getline(in, header);
  CHECK(header == "mode,level,seed,metric,value");
  int rows = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 4);  // 2 levels x 1 seed x 2 metrics
}

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: test_cli <path-to-orient-binary>\n");
    return 1;
  }
  g_binary = argv[1];
  g_workspace = (fs::temp_directory_path() / "orient_cli_test").string();
  fs::remove_all(g_workspace);
  fs::create_directories(g_workspace);

  doctest::Context context;
  const int res = context.run();
  fs::remove_all(g_workspace);
  return res;
}
