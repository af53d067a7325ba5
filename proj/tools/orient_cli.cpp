// orient: file-based pipeline for recovering projection orientations.
//
// Stages read and write files in a workspace (ORIENT_WORKSPACE or the current
// directory), record a manifest with content hashes of their inputs, and skip
// re-runs whose inputs and parameters are unchanged unless --force is given.
//
// Exit codes: 0 success, 2 validation error, 3 numerical divergence.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "orient/alignment.hpp"
#include "orient/dataset.hpp"
#include "orient/estimator.hpp"
#include "orient/geometry.hpp"
#include "orient/graph.hpp"
#include "orient/metrics.hpp"
#include "orient/phantom.hpp"
#include "orient/projector.hpp"
#include "orient/reconstruct.hpp"
#include "orient/recovery.hpp"
#include "orient/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace orient;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// workspace and hashing

std::string workspace_root() {
  const char* env = std::getenv("ORIENT_WORKSPACE");
  return env != nullptr && *env != '\0' ? std::string(env) : std::string(".");
}

std::string resolve(const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(workspace_root()) / path).string();
}

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open input file: " + path);
  char buf[65536];
  std::uint64_t h = 0xcbf29ce484222325ull;
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

std::string hash_params(const json& params) {
  const std::string text = params.dump();
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(fnv1a(text.data(), text.size())));
  return hex;
}

// ---------------------------------------------------------------------------
// experiment config document

const std::map<std::string, std::vector<std::string>>& config_schema() {
  static const std::map<std::string, std::vector<std::string>> schema = {
      {"phantom", {"kind", "size", "seed"}},
      {"simulate",
       {"count", "sampling", "restrict", "out_size", "shift_limit", "noise_variance", "seed"}},
      {"split", {"train", "val", "test", "seed"}},
      {"pairs", {"fraction", "bins", "seed"}},
      {"estimator",
       {"epochs", "batch_size", "learning_rate", "optimizer", "feature_distance", "feature_dim",
        "seed"}},
      {"recovery",
       {"batch_size", "learning_rate", "max_steps", "checkpoint_interval", "convergence_window",
        "convergence_tolerance", "init", "seed"}},
      {"alignment",
       {"steps", "restarts_per_m", "learning_rate", "momentum", "decay", "decay_interval",
        "batch_size", "init_candidates", "seed"}},
      {"reconstruct", {"iterations", "size", "tikhonov", "shells", "fsc_threshold"}},
  };
  return schema;
}

json load_experiment_config(const std::string& path) {
  const json doc = detail::load_json_file(path);
  if (!doc.is_object()) throw std::invalid_argument("config: top level must be an object");
  if (!doc.contains("schema_version"))
    throw std::invalid_argument("config: missing schema_version");
  if (doc.at("schema_version").get<int>() != kSchemaVersion)
    throw std::invalid_argument("config: unsupported schema_version (expected 1)");
  const auto& schema = config_schema();
  for (const auto& [key, value] : doc.items()) {
    if (key == "schema_version") continue;
    auto it = schema.find(key);
    if (it == schema.end()) throw std::invalid_argument("config: unknown section '" + key + "'");
    if (!value.is_object())
      throw std::invalid_argument("config: section '" + key + "' must be an object");
    for (const auto& [field, fv] : value.items()) {
      (void)fv;
      if (std::find(it->second.begin(), it->second.end(), field) == it->second.end())
        throw std::invalid_argument("config: unknown key '" + key + "." + field + "'");
    }
  }
  return doc;
}

// pull a config override if present
template <typename T>
void cfg_get(const json& cfg, const std::string& section, const std::string& key, T& out) {
  if (cfg.contains(section) && cfg.at(section).contains(key))
    out = cfg.at(section).at(key).get<T>();
}

// ---------------------------------------------------------------------------
// stage wrapper: input validation, up-to-date check, manifest

struct StageIo {
  std::string stage;
  std::vector<std::string> inputs;   // resolved paths
  std::vector<std::string> outputs;  // resolved paths
  json params;
};

std::string manifest_path(const StageIo& io) { return io.outputs.at(0) + ".manifest.json"; }

bool stage_up_to_date(const StageIo& io) {
  const std::string mpath = manifest_path(io);
  if (!fs::exists(mpath)) return false;
  json m;
  try {
    m = detail::load_json_file(mpath);
  } catch (...) {
    return false;
  }
  if (!m.contains("config_hash") || m.at("config_hash") != hash_params(io.params)) return false;
  if (!m.contains("inputs")) return false;
  for (const auto& in : io.inputs) {
    if (!fs::exists(in)) return false;
    if (!m.at("inputs").contains(in) || m.at("inputs").at(in) != hash_file(in)) return false;
  }
  for (const auto& out : io.outputs)
    if (!fs::exists(out)) return false;
  return true;
}

template <typename Body>
void run_stage(const StageIo& io, bool force, Body&& body) {
  for (const auto& in : io.inputs)
    if (!fs::exists(in))
      throw std::runtime_error(io.stage + ": missing input file: " + in);
  if (!force && stage_up_to_date(io)) {
    std::cout << "[" << io.stage << "] up-to-date, skipping (use --force to re-run)\n";
    return;
  }
  for (const auto& out : io.outputs) {
    const fs::path parent = fs::path(out).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
  }
  const auto t0 = std::chrono::steady_clock::now();
  body();
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json manifest;
  manifest["stage"] = io.stage;
  manifest["tool_version"] = kToolVersion;
  manifest["config_hash"] = hash_params(io.params);
  manifest["params"] = io.params;
  manifest["wall_time_s"] = wall;
  manifest["inputs"] = json::object();
  for (const auto& in : io.inputs) manifest["inputs"][in] = hash_file(in);
  manifest["outputs"] = io.outputs;
  detail::save_json_file(manifest_path(io), manifest);
  std::cout << "[" << io.stage << "] done in " << wall << "s\n";
}

// ---------------------------------------------------------------------------
// shared parsing helpers

PhantomKind parse_phantom_kind(const std::string& s) {
  if (s == "blobs") return PhantomKind::kBlobs;
  if (s == "shell") return PhantomKind::kShell;
  if (s == "asymmetric-blobs") return PhantomKind::kAsymmetricBlobs;
  throw std::invalid_argument("unknown phantom kind: " + s);
}

SamplingScheme parse_sampling(const std::string& kind, const std::string& restrict_name) {
  DirectionRange range = DirectionRange::full();
  if (restrict_name == "half")
    range = DirectionRange::half();
  else if (restrict_name == "quarter")
    range = DirectionRange::quarter();
  else if (restrict_name != "none")
    throw std::invalid_argument("unknown direction restriction: " + restrict_name);
  if (kind == "uniform-so3") return SamplingScheme::uniform_so3(range);
  if (kind == "uniform-euler") return SamplingScheme::uniform_euler(range);
  throw std::invalid_argument("unknown sampling kind: " + kind);
}

FeatureDistanceKind parse_feature_distance(const std::string& s) {
  if (s == "cosine") return FeatureDistanceKind::kCosine;
  if (s == "euclidean") return FeatureDistanceKind::kEuclidean;
  throw std::invalid_argument("unknown feature distance: " + s);
}

std::vector<double> parse_levels(const std::string& csv) {
  std::vector<double> out;
  std::string cur;
  for (char ch : csv + ",") {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(std::stod(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (out.empty()) throw std::invalid_argument("empty level list");
  return out;
}

std::vector<UnitQuaternion> truth_orientations(const std::string& truth_csv) {
  auto truth = load_ground_truth_csv(truth_csv);
  std::vector<UnitQuaternion> qs;
  qs.reserve(truth.size());
  for (const auto& rec : truth) qs.push_back(rec.orientation);
  return qs;
}

std::vector<int> load_split_subset(const std::string& path, const std::string& subset) {
  const json j = detail::load_json_file(path);
  if (!j.contains(subset))
    throw std::runtime_error("split file " + path + " has no subset '" + subset + "'");
  return j.at(subset).get<std::vector<int>>();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"orientation recovery pipeline"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  std::string config_path;
  bool force = false;
  int threads = 1;
  std::int64_t seed_override = -1;
  app.add_option("--config", config_path, "experiment configuration document (JSON)");
  app.add_flag("--force", force, "re-run stages even when up-to-date");
  app.add_option("--threads", threads, "worker threads for stage internals (default 1)");
  app.add_option("--seed", seed_override, "override the stage seed");

  // config defaults are loaded before option declaration so that flags
  // override file values
  json cfg = json::object();
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--config") config_path = argv[i + 1];

  try {
    if (!config_path.empty()) cfg = load_experiment_config(resolve(config_path));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  // ---- phantom ------------------------------------------------------------
  auto* sc_phantom = app.add_subcommand("phantom", "generate a synthetic density volume");
  struct {
    std::string kind = "asymmetric-blobs";
    int size = 32;
    std::uint64_t seed = 1;
    std::string out;
  } ph;
  cfg_get(cfg, "phantom", "kind", ph.kind);
  cfg_get(cfg, "phantom", "size", ph.size);
  cfg_get(cfg, "phantom", "seed", ph.seed);
  sc_phantom->add_option("--kind", ph.kind, "blobs | shell | asymmetric-blobs");
  sc_phantom->add_option("--size", ph.size, "cubic voxel count");
  sc_phantom->add_option("--seed", ph.seed, "phantom seed");
  sc_phantom->add_option("--out", ph.out, "output volume base path")->required();

  // ---- project ------------------------------------------------------------
  auto* sc_project = app.add_subcommand("project", "simulate a projection stack");
  struct {
    std::string volume, out, truth, orientations;
    int count = 500;
    std::string sampling = "uniform-so3";
    std::string restriction = "none";
    int out_size = 0;
    double shift_limit = 0.0;
    double noise_variance = 0.0;
    std::uint64_t seed = 7;
  } pr;
  cfg_get(cfg, "simulate", "count", pr.count);
  cfg_get(cfg, "simulate", "sampling", pr.sampling);
  cfg_get(cfg, "simulate", "restrict", pr.restriction);
  cfg_get(cfg, "simulate", "out_size", pr.out_size);
  cfg_get(cfg, "simulate", "shift_limit", pr.shift_limit);
  cfg_get(cfg, "simulate", "noise_variance", pr.noise_variance);
  cfg_get(cfg, "simulate", "seed", pr.seed);
  sc_project->add_option("--volume", pr.volume, "input volume base path")->required();
  sc_project->add_option("--out", pr.out, "output stack base path")->required();
  sc_project->add_option("--truth", pr.truth, "ground-truth CSV output")->required();
  sc_project->add_option("--count", pr.count, "projections to simulate");
  sc_project->add_option("--sampling", pr.sampling, "uniform-so3 | uniform-euler");
  sc_project->add_option("--restrict", pr.restriction, "none | half | quarter");
  sc_project->add_option("--out-size", pr.out_size, "detector pixels (default: volume size)");
  sc_project->add_option("--shift-limit", pr.shift_limit, "triangular shift limit, pixels");
  sc_project->add_option("--noise-variance", pr.noise_variance, "additive Gaussian variance");
  sc_project->add_option("--orientations", pr.orientations,
                         "project these orientations instead of sampling");
  sc_project->add_option("--seed", pr.seed, "simulation seed");

  // ---- split ----------------------------------------------------------------
  auto* sc_split = app.add_subcommand("split", "split indices into train/val/test");
  struct {
    int count = 0;
    double train = 0.50, val = 0.17, test = 0.33;
    std::uint64_t seed = 3;
    std::string out;
  } sp;
  cfg_get(cfg, "split", "train", sp.train);
  cfg_get(cfg, "split", "val", sp.val);
  cfg_get(cfg, "split", "test", sp.test);
  cfg_get(cfg, "split", "seed", sp.seed);
  sc_split->add_option("--count", sp.count, "total projection count")->required();
  sc_split->add_option("--train", sp.train, "train fraction");
  sc_split->add_option("--val", sp.val, "validation fraction");
  sc_split->add_option("--test", sp.test, "test fraction");
  sc_split->add_option("--seed", sp.seed, "shuffle seed");
  sc_split->add_option("--out", sp.out, "output split JSON")->required();

  // ---- pairs ----------------------------------------------------------------
  auto* sc_pairs = app.add_subcommand("pairs", "sample distance-uniform projection pairs");
  struct {
    std::string truth, split_file, subset = "train", out;
    double fraction = 0.12;
    int bins = 32;
    std::uint64_t seed = 5;
  } pa;
  cfg_get(cfg, "pairs", "fraction", pa.fraction);
  cfg_get(cfg, "pairs", "bins", pa.bins);
  cfg_get(cfg, "pairs", "seed", pa.seed);
  sc_pairs->add_option("--truth", pa.truth, "ground-truth CSV")->required();
  sc_pairs->add_option("--split", pa.split_file, "split JSON")->required();
  sc_pairs->add_option("--subset", pa.subset, "train | val | test");
  sc_pairs->add_option("--fraction", pa.fraction, "fraction of candidate pairs");
  sc_pairs->add_option("--bins", pa.bins, "stratification bins over [0, pi]");
  sc_pairs->add_option("--seed", pa.seed, "sampling seed");
  sc_pairs->add_option("--out", pa.out, "output pair CSV")->required();

  // ---- train ----------------------------------------------------------------
  auto* sc_train = app.add_subcommand("train", "train the Siamese distance estimator");
  struct {
    std::string stack, pairs, val_pairs, out, history;
    int epochs = 50;
    int batch_size = 256;
    double learning_rate = 1e-3;
    std::string optimizer = "rmsprop";
    std::string feature_distance = "cosine";
    int feature_dim = 64;
    std::uint64_t seed = 9;
  } tr;
  cfg_get(cfg, "estimator", "epochs", tr.epochs);
  cfg_get(cfg, "estimator", "batch_size", tr.batch_size);
  cfg_get(cfg, "estimator", "learning_rate", tr.learning_rate);
  cfg_get(cfg, "estimator", "optimizer", tr.optimizer);
  cfg_get(cfg, "estimator", "feature_distance", tr.feature_distance);
  cfg_get(cfg, "estimator", "feature_dim", tr.feature_dim);
  cfg_get(cfg, "estimator", "seed", tr.seed);
  sc_train->add_option("--stack", tr.stack, "projection stack base path")->required();
  sc_train->add_option("--pairs", tr.pairs, "training pair CSV")->required();
  sc_train->add_option("--val-pairs", tr.val_pairs, "validation pair CSV")->required();
  sc_train->add_option("--out", tr.out, "model checkpoint output")->required();
  sc_train->add_option("--history", tr.history, "loss history CSV output")->required();
  sc_train->add_option("--epochs", tr.epochs);
  sc_train->add_option("--batch-size", tr.batch_size);
  sc_train->add_option("--learning-rate", tr.learning_rate);
  sc_train->add_option("--optimizer", tr.optimizer, "rmsprop | sgd");
  sc_train->add_option("--feature-distance", tr.feature_distance, "cosine | euclidean");
  sc_train->add_option("--feature-dim", tr.feature_dim);
  sc_train->add_option("--seed", tr.seed, "training seed");

  // ---- estimate ---------------------------------------------------------------
  auto* sc_estimate = app.add_subcommand("estimate", "estimate a pairwise distance graph");
  struct {
    std::string stack, pairs, out, model;
    std::string estimator = "siamese";
  } es;
  sc_estimate->add_option("--stack", es.stack, "projection stack base path")->required();
  sc_estimate->add_option("--pairs", es.pairs, "pair CSV")->required();
  sc_estimate->add_option("--out", es.out, "output graph CSV")->required();
  sc_estimate->add_option("--estimator", es.estimator, "siamese | euclidean");
  sc_estimate->add_option("--model", es.model, "model checkpoint (siamese only)");

  // ---- recover ----------------------------------------------------------------
  auto* sc_recover = app.add_subcommand("recover", "recover orientations from a graph");
  struct {
    std::string graph, out, trace, init_orientations;
    int count = 0;
    int batch_size = 256;
    double learning_rate = 0.1;
    int max_steps = 20000;
    int checkpoint_interval = 100;
    int convergence_window = 20;
    double convergence_tolerance = 1e-5;
    std::uint64_t seed = 11;
  } rc;
  cfg_get(cfg, "recovery", "batch_size", rc.batch_size);
  cfg_get(cfg, "recovery", "learning_rate", rc.learning_rate);
  cfg_get(cfg, "recovery", "max_steps", rc.max_steps);
  cfg_get(cfg, "recovery", "checkpoint_interval", rc.checkpoint_interval);
  cfg_get(cfg, "recovery", "convergence_window", rc.convergence_window);
  cfg_get(cfg, "recovery", "convergence_tolerance", rc.convergence_tolerance);
  cfg_get(cfg, "recovery", "seed", rc.seed);
  sc_recover->add_option("--graph", rc.graph, "distance graph CSV")->required();
  sc_recover->add_option("--out", rc.out, "recovered orientation CSV")->required();
  sc_recover->add_option("--trace", rc.trace, "loss trace JSON output")->required();
  sc_recover->add_option("--count", rc.count, "node count (default: max index + 1)");
  sc_recover->add_option("--batch-size", rc.batch_size);
  sc_recover->add_option("--learning-rate", rc.learning_rate);
  sc_recover->add_option("--max-steps", rc.max_steps);
  sc_recover->add_option("--checkpoint-interval", rc.checkpoint_interval);
  sc_recover->add_option("--convergence-window", rc.convergence_window);
  sc_recover->add_option("--convergence-tolerance", rc.convergence_tolerance);
  sc_recover->add_option("--init-orientations", rc.init_orientations,
                         "start from these orientations");
  sc_recover->add_option("--seed", rc.seed, "initialization/batch seed");

  // ---- align --------------------------------------------------------------
  auto* sc_align = app.add_subcommand("align", "align recovered orientations to ground truth");
  struct {
    std::string truth, estimate, out, aligned_out;
    int steps = 300;
    int restarts = 3;
    double learning_rate = 0.5;
    double momentum = 0.5;
    double decay = 0.5;
    int decay_interval = 30;
    int batch_size = 256;
    int init_candidates = 256;
    std::uint64_t seed = 13;
  } al;
  cfg_get(cfg, "alignment", "steps", al.steps);
  cfg_get(cfg, "alignment", "restarts_per_m", al.restarts);
  cfg_get(cfg, "alignment", "learning_rate", al.learning_rate);
  cfg_get(cfg, "alignment", "momentum", al.momentum);
  cfg_get(cfg, "alignment", "decay", al.decay);
  cfg_get(cfg, "alignment", "decay_interval", al.decay_interval);
  cfg_get(cfg, "alignment", "batch_size", al.batch_size);
  cfg_get(cfg, "alignment", "init_candidates", al.init_candidates);
  cfg_get(cfg, "alignment", "seed", al.seed);
  sc_align->add_option("--truth", al.truth, "ground-truth CSV")->required();
  sc_align->add_option("--estimate", al.estimate, "recovered orientation CSV")->required();
  sc_align->add_option("--out", al.out, "alignment result JSON")->required();
  sc_align->add_option("--aligned-out", al.aligned_out, "write aligned orientations CSV");
  sc_align->add_option("--steps", al.steps);
  sc_align->add_option("--restarts", al.restarts, "restarts per reflection value");
  sc_align->add_option("--learning-rate", al.learning_rate);
  sc_align->add_option("--momentum", al.momentum);
  sc_align->add_option("--decay", al.decay);
  sc_align->add_option("--decay-interval", al.decay_interval);
  sc_align->add_option("--batch-size", al.batch_size);
  sc_align->add_option("--init-candidates", al.init_candidates);
  sc_align->add_option("--seed", al.seed, "restart seed");

  // ---- reconstruct ----------------------------------------------------------
  auto* sc_reconstruct = app.add_subcommand("reconstruct", "CGLS density reconstruction");
  struct {
    std::string stack, orientations, out;
    int iterations = 30;
    int size = 0;
    double tikhonov = 0.0;
  } re;
  cfg_get(cfg, "reconstruct", "iterations", re.iterations);
  cfg_get(cfg, "reconstruct", "size", re.size);
  cfg_get(cfg, "reconstruct", "tikhonov", re.tikhonov);
  sc_reconstruct->add_option("--stack", re.stack, "projection stack base path")->required();
  sc_reconstruct->add_option("--orientations", re.orientations, "orientation CSV")->required();
  sc_reconstruct->add_option("--out", re.out, "output volume base path")->required();
  sc_reconstruct->add_option("--iterations", re.iterations);
  sc_reconstruct->add_option("--size", re.size, "output grid size (default: stack width)");
  sc_reconstruct->add_option("--tikhonov", re.tikhonov, "regularization epsilon");

  // ---- fsc ------------------------------------------------------------------
  auto* sc_fsc = app.add_subcommand("fsc", "Fourier shell correlation of two volumes");
  struct {
    std::string a, b, out, summary;
    int shells = 16;
    double threshold = 0.5;
  } fc;
  cfg_get(cfg, "reconstruct", "shells", fc.shells);
  cfg_get(cfg, "reconstruct", "fsc_threshold", fc.threshold);
  sc_fsc->add_option("--a", fc.a, "first volume base path")->required();
  sc_fsc->add_option("--b", fc.b, "second volume base path")->required();
  sc_fsc->add_option("--out", fc.out, "FSC curve CSV output")->required();
  sc_fsc->add_option("--summary", fc.summary, "FSC summary JSON output")->required();
  sc_fsc->add_option("--shells", fc.shells);
  sc_fsc->add_option("--threshold", fc.threshold, "resolution threshold (0.5; 0.143 optional)");

  // ---- sweep ------------------------------------------------------------------
  auto* sc_sweep = app.add_subcommand("sweep", "perturbation/noise/shift grids, tidy CSV out");
  struct {
    std::string mode = "perturb";
    std::string levels = "0,0.2,0.4,0.8";
    int seeds = 3;
    int count = 500;
    int size = 32;
    int epochs = 30;
    double fraction = 0.12;
    std::string out;
    std::uint64_t seed = 17;
  } sw;
  sc_sweep->add_option("--mode", sw.mode, "perturb | noise | shift");
  sc_sweep->add_option("--levels", sw.levels, "comma-separated grid values");
  sc_sweep->add_option("--seeds", sw.seeds, "trials per level");
  sc_sweep->add_option("--count", sw.count, "projections per trial");
  sc_sweep->add_option("--size", sw.size, "volume/projection size");
  sc_sweep->add_option("--epochs", sw.epochs, "training epochs (noise/shift modes)");
  sc_sweep->add_option("--fraction", sw.fraction, "pair fraction (noise/shift modes)");
  sc_sweep->add_option("--seed", sw.seed, "base seed");
  sc_sweep->add_option("--out", sw.out, "tidy CSV output")->required();

  // ---- report ------------------------------------------------------------------
  auto* sc_report = app.add_subcommand("report", "aggregate stage manifests into a metrics report");
  struct {
    std::string dir;
    std::string out;
  } rp;
  sc_report->add_option("--dir", rp.dir, "directory to scan (default: workspace root)");
  sc_report->add_option("--out", rp.out, "metrics report JSON output")->required();

  for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  const auto chosen_seed = [&](std::uint64_t stage_seed) {
    return seed_override >= 0 ? static_cast<std::uint64_t>(seed_override) : stage_seed;
  };

  try {
    if (*sc_phantom) {
      ph.seed = chosen_seed(ph.seed);
      StageIo io{"phantom",
                 {},
                 {resolve(ph.out) + ".raw", resolve(ph.out) + ".json"},
                 {{"kind", ph.kind}, {"size", ph.size}, {"seed", ph.seed}}};
      run_stage(io, force, [&] {
        save_volume(resolve(ph.out), make_phantom(parse_phantom_kind(ph.kind), ph.size, ph.seed));
      });
    } else if (*sc_project) {
      pr.seed = chosen_seed(pr.seed);
      StageIo io{"project",
                 {resolve(pr.volume) + ".raw", resolve(pr.volume) + ".json"},
                 {resolve(pr.out) + ".raw", resolve(pr.out) + ".json", resolve(pr.truth)},
                 {{"count", pr.count},
                  {"sampling", pr.sampling},
                  {"restrict", pr.restriction},
                  {"out_size", pr.out_size},
                  {"shift_limit", pr.shift_limit},
                  {"noise_variance", pr.noise_variance},
                  {"orientations", pr.orientations},
                  {"seed", pr.seed}}};
      if (!pr.orientations.empty()) io.inputs.push_back(resolve(pr.orientations));
      run_stage(io, force, [&] {
        const VolumeGrid vol = load_volume(resolve(pr.volume));
        std::vector<UnitQuaternion> qs;
        if (!pr.orientations.empty())
          qs = load_orientations_csv(resolve(pr.orientations));
        else
          qs = sample_orientations(parse_sampling(pr.sampling, pr.restriction), pr.count,
                                   mix_seed(pr.seed, 0x0a11));
        auto sim = simulate_stack(vol, qs, PerturbationSpec{pr.shift_limit, pr.noise_variance},
                                  pr.seed, pr.out_size, threads);
        save_stack(resolve(pr.out), sim.stack);
        save_ground_truth_csv(resolve(pr.truth), sim.truth);
      });
    } else if (*sc_split) {
      sp.seed = chosen_seed(sp.seed);
      StageIo io{"split",
                 {},
                 {resolve(sp.out)},
                 {{"count", sp.count},
                  {"train", sp.train},
                  {"val", sp.val},
                  {"test", sp.test},
                  {"seed", sp.seed}}};
      run_stage(io, force, [&] {
        auto s = split(sp.count, SplitSpec{sp.train, sp.val, sp.test, sp.seed});
        detail::save_json_file(resolve(sp.out),
                               {{"train", s.train}, {"val", s.val}, {"test", s.test}});
      });
    } else if (*sc_pairs) {
      pa.seed = chosen_seed(pa.seed);
      StageIo io{"pairs",
                 {resolve(pa.truth), resolve(pa.split_file)},
                 {resolve(pa.out)},
                 {{"subset", pa.subset},
                  {"fraction", pa.fraction},
                  {"bins", pa.bins},
                  {"seed", pa.seed}}};
      run_stage(io, force, [&] {
        auto qs = truth_orientations(resolve(pa.truth));
        auto indices = load_split_subset(resolve(pa.split_file), pa.subset);
        save_pairs_csv(resolve(pa.out), make_uniform_pairs(indices, qs, pa.fraction, pa.bins, pa.seed));
      });
    } else if (*sc_train) {
      tr.seed = chosen_seed(tr.seed);
      StageIo io{"train",
                 {resolve(tr.stack) + ".raw", resolve(tr.stack) + ".json", resolve(tr.pairs),
                  resolve(tr.val_pairs)},
                 {resolve(tr.out), resolve(tr.history)},
                 {{"epochs", tr.epochs},
                  {"batch_size", tr.batch_size},
                  {"learning_rate", tr.learning_rate},
                  {"optimizer", tr.optimizer},
                  {"feature_distance", tr.feature_distance},
                  {"feature_dim", tr.feature_dim},
                  {"seed", tr.seed}}};
      run_stage(io, force, [&] {
        const ProjectionStack stack = load_stack(resolve(tr.stack));
        const PairSet pairs = load_pairs_csv(resolve(tr.pairs));
        const PairSet val = load_pairs_csv(resolve(tr.val_pairs));
        TrainConfig config;
        config.epochs = tr.epochs;
        config.batch_size = tr.batch_size;
        config.learning_rate = tr.learning_rate;
        config.optimizer = tr.optimizer == "sgd" ? OptimizerKind::kSgd : OptimizerKind::kRmsProp;
        config.seed = tr.seed;
        config.threads = threads;
        auto net = EmbeddingNet::create(NetworkArchitecture::standard(tr.feature_dim), tr.seed);
        auto history =
            train(net, stack, pairs, val, parse_feature_distance(tr.feature_distance), config);
        save_checkpoint(resolve(tr.out), net);
        save_history_csv(resolve(tr.history), history);
      });
    } else if (*sc_estimate) {
      StageIo io{"estimate",
                 {resolve(es.stack) + ".raw", resolve(es.stack) + ".json", resolve(es.pairs)},
                 {resolve(es.out)},
                 {{"estimator", es.estimator}, {"model", es.model}}};
      if (es.estimator == "siamese") {
        if (es.model.empty())
          throw std::invalid_argument("estimate: --model is required with the siamese estimator");
        io.inputs.push_back(resolve(es.model));
      } else if (es.estimator != "euclidean") {
        throw std::invalid_argument("estimate: unknown estimator " + es.estimator);
      }
      run_stage(io, force, [&] {
        const ProjectionStack stack = load_stack(resolve(es.stack));
        const PairSet pairs = load_pairs_csv(resolve(es.pairs));
        DistanceEstimator estimator =
            es.estimator == "euclidean"
                ? DistanceEstimator::euclidean_baseline()
                : DistanceEstimator::siamese(load_checkpoint(resolve(es.model)));
        save_graph_csv(resolve(es.out), estimate_graph(estimator, stack, pairs, threads));
      });
    } else if (*sc_recover) {
      rc.seed = chosen_seed(rc.seed);
      StageIo io{"recover",
                 {resolve(rc.graph)},
                 {resolve(rc.out), resolve(rc.trace)},
                 {{"count", rc.count},
                  {"batch_size", rc.batch_size},
                  {"learning_rate", rc.learning_rate},
                  {"max_steps", rc.max_steps},
                  {"checkpoint_interval", rc.checkpoint_interval},
                  {"convergence_window", rc.convergence_window},
                  {"convergence_tolerance", rc.convergence_tolerance},
                  {"init", rc.init_orientations},
                  {"seed", rc.seed}}};
      if (!rc.init_orientations.empty()) io.inputs.push_back(resolve(rc.init_orientations));
      run_stage(io, force, [&] {
        const DistanceGraph graph = load_graph_csv(resolve(rc.graph), rc.count);
        RecoveryConfig config;
        config.batch_size = rc.batch_size;
        config.learning_rate = rc.learning_rate;
        config.max_steps = rc.max_steps;
        config.checkpoint_interval = rc.checkpoint_interval;
        config.convergence_window = rc.convergence_window;
        config.convergence_tolerance = rc.convergence_tolerance;
        config.seed = rc.seed;
        if (!rc.init_orientations.empty()) {
          config.init = RecoveryInit::kProvided;
          config.initial = load_orientations_csv(resolve(rc.init_orientations));
        }
        auto result = recover(graph, config);
        if (!result.graph_connected)
          std::cerr << "warning: distance graph is disconnected; components are "
                       "recovered up to independent global rotations\n";
        save_orientations_csv(resolve(rc.out), result.orientations);
        detail::save_json_file(resolve(rc.trace), recovery_trace_json(result));
      });
    } else if (*sc_align) {
      al.seed = chosen_seed(al.seed);
      StageIo io{"align",
                 {resolve(al.truth), resolve(al.estimate)},
                 {resolve(al.out)},
                 {{"steps", al.steps},
                  {"restarts_per_m", al.restarts},
                  {"learning_rate", al.learning_rate},
                  {"momentum", al.momentum},
                  {"decay", al.decay},
                  {"decay_interval", al.decay_interval},
                  {"batch_size", al.batch_size},
                  {"init_candidates", al.init_candidates},
                  {"aligned_out", al.aligned_out},
                  {"seed", al.seed}}};
      if (!al.aligned_out.empty()) io.outputs.push_back(resolve(al.aligned_out));
      run_stage(io, force, [&] {
        auto truth = truth_orientations(resolve(al.truth));
        auto estimate = load_orientations_csv(resolve(al.estimate));
        AlignConfig config;
        config.steps = al.steps;
        config.restarts_per_m = al.restarts;
        config.learning_rate = al.learning_rate;
        config.momentum = al.momentum;
        config.decay = al.decay;
        config.decay_interval = al.decay_interval;
        config.batch_size = al.batch_size;
        config.init_candidates = al.init_candidates;
        config.seed = al.seed;
        auto result = align(truth, estimate, config);
        detail::save_json_file(resolve(al.out), alignment_result_json(result));
        if (!al.aligned_out.empty()) {
          const Mat4 tm = o4_matrix(result.transform);
          std::vector<UnitQuaternion> aligned;
          aligned.reserve(estimate.size());
          for (const auto& q : estimate) {
            auto y = tm.apply(q.components());
            aligned.emplace_back(y[0], y[1], y[2], y[3]);
          }
          save_orientations_csv(resolve(al.aligned_out), aligned);
        }
        std::cout << "E_OR = " << result.e_or << " rad (m = " << result.winning_reflection
                  << ")\n";
      });
    } else if (*sc_reconstruct) {
      StageIo io{"reconstruct",
                 {resolve(re.stack) + ".raw", resolve(re.stack) + ".json",
                  resolve(re.orientations)},
                 {resolve(re.out) + ".raw", resolve(re.out) + ".json"},
                 {{"iterations", re.iterations}, {"size", re.size}, {"tikhonov", re.tikhonov}}};
      run_stage(io, force, [&] {
        const ProjectionStack stack = load_stack(resolve(re.stack));
        auto qs = load_orientations_csv(resolve(re.orientations));
        ReconstructionConfig config;
        config.iterations = re.iterations;
        config.grid_size = re.size > 0 ? re.size : stack.width;
        config.tikhonov = re.tikhonov;
        config.threads = threads;
        auto result = cgls_reconstruct(stack, qs, config);
        save_volume(resolve(re.out), result.volume);
      });
    } else if (*sc_fsc) {
      StageIo io{"fsc",
                 {resolve(fc.a) + ".raw", resolve(fc.a) + ".json", resolve(fc.b) + ".raw",
                  resolve(fc.b) + ".json"},
                 {resolve(fc.out), resolve(fc.summary)},
                 {{"shells", fc.shells}, {"threshold", fc.threshold}}};
      run_stage(io, force, [&] {
        auto curve = fsc(load_volume(resolve(fc.a)), load_volume(resolve(fc.b)), fc.shells,
                         fc.threshold);
        save_fsc_csv(resolve(fc.out), curve);
        detail::save_json_file(resolve(fc.summary), fsc_summary_json(curve));
      });
    } else if (*sc_sweep) {
      sw.seed = chosen_seed(sw.seed);
      const auto levels = parse_levels(sw.levels);
      StageIo io{"sweep",
                 {},
                 {resolve(sw.out)},
                 {{"mode", sw.mode},
                  {"levels", levels},
                  {"seeds", sw.seeds},
                  {"count", sw.count},
                  {"size", sw.size},
                  {"epochs", sw.epochs},
                  {"fraction", sw.fraction},
                  {"seed", sw.seed}}};
      run_stage(io, force, [&] {
        std::ofstream out(resolve(sw.out));
        if (!out) throw std::runtime_error("sweep: cannot open " + resolve(sw.out));
        out << "mode,level,seed,metric,value\n";
        auto emit = [&](double level, int trial, const std::string& metric, double value) {
          out << sw.mode << "," << level << "," << trial << "," << metric << "," << value << "\n";
        };
        if (sw.mode == "perturb") {
          auto qs = sample_orientations(SamplingScheme::uniform_so3(), sw.count,
                                        mix_seed(sw.seed, 1));
          auto graph = exact_distance_graph(qs);
          for (double level : levels) {
            for (int trial = 0; trial < sw.seeds; ++trial) {
              auto noisy = perturb_graph(graph, level, mix_seed(sw.seed, 100 + trial));
              RecoveryConfig rcfg;
              rcfg.seed = mix_seed(sw.seed, 200 + trial);
              auto rec = recover(noisy, rcfg);
              AlignConfig acfg;
              acfg.seed = mix_seed(sw.seed, 300 + trial);
              auto alr = align(qs, rec.orientations, acfg);
              emit(level, trial, "e_or", alr.e_or);
              emit(level, trial, "min_checkpoint_lor", rec.min_checkpoint_loss());
            }
          }
        } else if (sw.mode == "noise" || sw.mode == "shift") {
          auto vol = make_phantom(PhantomKind::kAsymmetricBlobs, sw.size, mix_seed(sw.seed, 2));
          for (double level : levels) {
            for (int trial = 0; trial < sw.seeds; ++trial) {
              const std::uint64_t trial_seed = mix_seed(sw.seed, 1000 + trial);
              auto qs = sample_orientations(SamplingScheme::uniform_so3(), sw.count,
                                            mix_seed(trial_seed, 1));
              PerturbationSpec perturb;
              if (sw.mode == "noise")
                perturb.noise_variance = level;
              else
                perturb.shift_limit = level;
              auto sim = simulate_stack(vol, qs, perturb, mix_seed(trial_seed, 2), sw.size,
                                        threads);
              auto splits = split(sw.count, SplitSpec{0.5, 0.17, 0.33, mix_seed(trial_seed, 3)});
              auto train_pairs =
                  make_uniform_pairs(splits.train, qs, sw.fraction, 32, mix_seed(trial_seed, 4));
              auto val_pairs =
                  make_uniform_pairs(splits.val, qs, sw.fraction, 32, mix_seed(trial_seed, 5));
              TrainConfig tcfg;
              tcfg.epochs = sw.epochs;
              tcfg.seed = mix_seed(trial_seed, 6);
              tcfg.threads = threads;
              auto net = EmbeddingNet::create(NetworkArchitecture::standard(64), tcfg.seed);
              auto history = train(net, sim.stack, train_pairs, val_pairs,
                                   FeatureDistanceKind::kCosine, tcfg);
              emit(level, trial, "final_val_lde", history.val_lde.back());
              const std::size_t tail = std::min<std::size_t>(10, history.val_lde.size());
              std::vector<double> last(history.val_lde.end() - static_cast<std::ptrdiff_t>(tail),
                                       history.val_lde.end());
              emit(level, trial, "median_val_lde_tail", median(last));
            }
          }
        } else {
          throw std::invalid_argument("sweep: unknown mode " + sw.mode);
        }
      });
    } else if (*sc_report) {
      const std::string root = rp.dir.empty() ? workspace_root() : resolve(rp.dir);
      json report;
      report["tool_version"] = kToolVersion;
      report["config_hash"] = hash_params(json{{"dir", root}});
      report["stages"] = json::array();
      if (fs::exists(root)) {
        std::vector<std::string> manifests;
        for (const auto& entry : fs::recursive_directory_iterator(root)) {
          if (!entry.is_regular_file()) continue;
          const std::string name = entry.path().filename().string();
          if (name.size() > 14 && name.substr(name.size() - 14) == ".manifest.json")
            manifests.push_back(entry.path().string());
        }
        std::sort(manifests.begin(), manifests.end());
        for (const auto& mpath : manifests) {
          json m = detail::load_json_file(mpath);
          json stage;
          stage["stage"] = m.value("stage", "?");
          stage["manifest"] = mpath;
          stage["config_hash"] = m.value("config_hash", "");
          stage["wall_time_s"] = m.value("wall_time_s", 0.0);
          if (m.contains("params") && m.at("params").contains("seed"))
            stage["seed"] = m.at("params").at("seed");
          // pull headline metrics from known output kinds
          json metrics = json::object();
          for (const auto& out_path : m.value("outputs", std::vector<std::string>{})) {
            if (!fs::exists(out_path)) continue;
            if (out_path.size() > 4 && out_path.substr(out_path.size() - 4) == ".csv") {
              try {
                auto history = load_history_csv(out_path);
                if (!history.val_lde.empty()) {
                  metrics["val_lde_epoch0"] = history.val_lde.front();
                  metrics["val_lde_final"] = history.val_lde.back();
                }
              } catch (...) {
              }
            } else if (out_path.size() > 5 && out_path.substr(out_path.size() - 5) == ".json") {
              try {
                json j = detail::load_json_file(out_path);
                if (j.contains("e_or")) metrics["e_or"] = j.at("e_or");
                if (j.contains("checkpoint_loss") && !j.at("checkpoint_loss").empty()) {
                  double best = std::numeric_limits<double>::infinity();
                  for (double v : j.at("checkpoint_loss").get<std::vector<double>>())
                    best = std::min(best, v);
                  metrics["min_checkpoint_lor"] = best;
                  metrics["converged"] = j.value("converged", false);
                }
                if (j.contains("resolution_at_threshold"))
                  metrics["resolution_at_threshold"] = j.at("resolution_at_threshold");
              } catch (...) {
              }
            }
          }
          stage["metrics"] = metrics;
          report["stages"].push_back(stage);
        }
      }
      const fs::path parent = fs::path(resolve(rp.out)).parent_path();
      if (!parent.empty()) fs::create_directories(parent);
      detail::save_json_file(resolve(rp.out), report);
      std::cout << "[report] " << report["stages"].size() << " stages\n";
    }
  } catch (const TrainingDivergedError& e) {
    std::cerr << "numerical divergence: " << e.what() << "\n";
    return 3;
  } catch (const RecoveryDivergedError& e) {
    std::cerr << "numerical divergence: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::runtime_error& e) {
    const std::string what = e.what();
    if (what.find("diverged") != std::string::npos) {
      std::cerr << "numerical divergence: " << what << "\n";
      return 3;
    }
    std::cerr << "error: " << what << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
