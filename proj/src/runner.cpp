#include "ftpg/runner.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

namespace ftpg {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

fs::path under(const fs::path& out_dir, const fs::path& p) {
  return p.is_absolute() || out_dir.empty() ? p : out_dir / p;
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::trunc) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string());
  }
  std::ofstream f(path, std::ios::binary | std::ios::out | mode);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  return f;
}

ordered_json read_json(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  ordered_json j = ordered_json::parse(f, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config: " + path.string() + " is not valid JSON");
  return j;
}

Vector checked_params(const ExperimentConfig& cfg, const World& w, const ModelSnapshot& snap) {
  if (snap.method != cfg.method)
    throw ConfigError("snapshot holds " + std::string(method_name(snap.method)) +
                      " but the config asks for " + std::string(method_name(cfg.method)));
  const ModelSpec spec = model_spec(cfg, w.store.prompt_len, w.store.dim);
  const Vector expect = initial_params(spec, w.enc, w.partition.shards.size(), cfg.seed);
  if (snap.values.size() != expect.size())
    throw ConfigError("snapshot has " + std::to_string(snap.values.size()) +
                      " values, the configured model needs " + std::to_string(expect.size()));
  return snap.values;
}

}  // namespace

World build_world(const ExperimentConfig& cfg, const fs::path& out_dir) {
  EmbeddingStore store = cfg.store.empty() ? synth_world(resolved_synth(cfg))
                                           : load_store(under(out_dir, cfg.store));
  SurrogateEncoder enc(store.encoder_seed, store.prompt_len, store.dim);
  ShardOptions opts;
  opts.classes_per_client = cfg.classes_per_client;
  opts.shots = cfg.shots;
  opts.seed = cfg.seed;
  opts.allow_mixed_shards = cfg.allow_mixed_shards;
  Partition part = build_shards(store, opts);
  return World{std::move(store), std::move(enc), std::move(part)};
}

int effective_threads(int configured) {
  int n = configured > 0 ? configured
                         : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* cap = std::getenv("FTPG_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(cap, &end, 10);
    if (end == cap || *end != '\0' || v < 1)
      throw ConfigError("FTPG_THREADS must be a positive integer");
    n = std::min<long>(n, v);
  }
  return n;
}

FederationResult train(const ExperimentConfig& cfg, const World& w) {
  FederationConfig fed = cfg.fed;
  fed.seed = cfg.seed;
  fed.threads = effective_threads(cfg.fed.threads);
  const ModelSpec spec = model_spec(cfg, w.store.prompt_len, w.store.dim);
  return run_federation(fed, spec, w.store, w.partition.shards, w.enc, cfg.predict,
                        ProtocolOptions{cfg.hm_terms});
}

MetricsRecord evaluate(const ExperimentConfig& cfg, const World& w, const ModelSnapshot& snap,
                       int round) {
  const Vector params = checked_params(cfg, w, snap);
  const ModelSpec spec = model_spec(cfg, w.store.prompt_len, w.store.dim);
  const Matrix handcrafted = handcrafted_prompts(w.enc);
  const auto r = eval_protocol(spec, params, w.store, w.partition.shards, w.enc, cfg.predict,
                               ProtocolOptions{cfg.hm_terms});
  const double loss =
      mean_shard_loss(spec, params, w.partition.shards, w.enc, cfg.predict, &handcrafted);
  return MetricsRecord{round, cfg.method, cfg.seed, loss, r.local, r.base, r.novel, r.hm};
}

PromptCloud prompt_cloud(const ExperimentConfig& cfg, const World& w, const ModelSnapshot& snap) {
  const Vector params = checked_params(cfg, w, snap);
  return collect_prompt_vectors(model_spec(cfg, w.store.prompt_len, w.store.dim), params,
                                w.store, w.partition.shards);
}

void write_manifest(const fs::path& path, const ExperimentConfig& cfg) {
  ExperimentConfig echo = cfg;
  const SynthConfig s = resolved_synth(cfg);
  echo.world_seed = s.seed;
  echo.encoder_seed = s.encoder_seed;
  auto f = open_out(path);
  f << to_json(echo).dump(2) << '\n';
  if (!f) throw IoError("failed writing " + path.string());
}

namespace {

struct CommonArgs {
  std::string preset = "desk";
  std::string config;
  std::vector<std::string> sets;
  std::string method;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::string store;
  std::optional<int> hm_terms;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--preset", a.preset, "desk or paper")->capture_default_str();
  cmd->add_option("--config", a.config, "JSON config file (a manifest.json works too)");
  cmd->add_option("--set", a.sets, "dotted override, e.g. fed.rounds=100")->allow_extra_args(false);
  cmd->add_option("--method", a.method, "zeroshot, coop_local, fedcoop, fedkgcoop or fedtpg");
  cmd->add_option("--seed", a.seed, "experiment seed");
  cmd->add_option("--out-dir", a.out_dir, "directory for every input and output path")
      ->capture_default_str();
  cmd->add_option("--store", a.store, "embedding store to use instead of a synthetic world");
  cmd->add_option("--hm-terms", a.hm_terms, "3 (local, base, new) or 2 (base, new)");
}

ExperimentConfig load_config(const CommonArgs& a) {
  const ExperimentConfig defaults = preset(a.preset);
  ordered_json j = ordered_json::object();
  if (!a.config.empty()) j = read_json(a.config);
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  for (const auto& s : a.sets) apply_override(j, s);
  if (!a.method.empty()) j["method"] = a.method;
  if (a.seed) j["seed"] = *a.seed;
  if (!a.store.empty()) j["store"] = a.store;
  if (a.hm_terms) j["eval"]["hm_terms"] = *a.hm_terms;
  return resolve(from_json(j, defaults));
}

void log_unassigned(const World& w, std::ostream& err) {
  if (w.partition.unassigned.empty()) return;
  err << "ftpg: " << w.partition.unassigned.size()
      << " base classes left unassigned (no full shard):";
  for (int id : w.partition.unassigned) err << ' ' << id;
  err << '\n';
}

void write_metrics(const fs::path& path, std::span<const MetricsRecord> records) {
  auto f = open_out(path);
  write_metrics_csv(f, records);
  if (!f) throw IoError("failed writing " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string());
}

void run_train(const ExperimentConfig& cfg, const fs::path& dir, std::ostream& out,
               std::ostream& err) {
  ensure_dir(dir);
  const World w = build_world(cfg, dir);
  log_unassigned(w, err);
  const FederationResult res = train(cfg, w);
  save_snapshot(res.final_model, dir / "snapshot.bin");
  write_metrics(dir / "metrics.csv", res.records);
  write_manifest(dir / "manifest.json", cfg);
  const auto& last = res.records.back();
  out << std::fixed << std::setprecision(4) << method_name(cfg.method) << " round " << last.round
      << ": local " << last.local_acc << " base " << last.base_acc << " new " << last.new_acc
      << " hm " << last.hm << '\n';
}

template <typename T>
std::string cell_part(const char* tag, T v) {
  std::ostringstream s;
  s << tag << v;
  return s.str();
}

}  // namespace

int run_experiment(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Federated text-driven prompt generation simulator", "ftpg"};
  app.require_subcommand(1);

  CommonArgs common;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic embedding store");
  std::string store_out = "store.ftpg";
  add_common(gen, common);
  gen->add_option("--output", store_out, "store file name")->capture_default_str();

  auto* tr = app.add_subcommand("train", "run a federation; write snapshot, metrics and manifest");
  add_common(tr, common);

  auto* ev = app.add_subcommand("eval", "evaluate a snapshot");
  std::string snapshot = "snapshot.bin";
  bool append = false;
  int eval_round = -1;
  add_common(ev, common);
  ev->add_option("--snapshot", snapshot)->capture_default_str();
  ev->add_flag("--append", append, "append the row to metrics.csv");
  ev->add_option("--round", eval_round, "round label for the row (default: fed.rounds)");

  auto* pca = app.add_subcommand("export-pca", "project generated prompt vectors to 3 PCs");
  std::string pca_out = "pca.csv";
  add_common(pca, common);
  pca->add_option("--snapshot", snapshot)->capture_default_str();
  pca->add_option("--output", pca_out)->capture_default_str();

  auto* sw = app.add_subcommand("sweep", "train every cell of a participation x shots x n grid");
  std::vector<double> rates;
  std::vector<int> shot_list, per_client;
  add_common(sw, common);
  sw->add_option("--participation", rates)->delimiter(',');
  sw->add_option("--shots", shot_list)->delimiter(',');
  sw->add_option("--classes-per-client", per_client)->delimiter(',');

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "ftpg: " << e.what() << '\n';
    return 1;
  }

  try {
    const ExperimentConfig cfg = load_config(common);
    const fs::path dir = common.out_dir;

    ensure_dir(dir);
    if (*gen) {
      const EmbeddingStore store = synth_world(resolved_synth(cfg));
      save_store(store, under(dir, store_out));
      write_manifest(dir / "manifest.json", cfg);
      out << "wrote " << store.num_classes() << " classes to " << under(dir, store_out).string()
          << '\n';
    } else if (*tr) {
      run_train(cfg, dir, out, err);
    } else if (*ev) {
      const World w = build_world(cfg, dir);
      const ModelSnapshot snap = load_snapshot(under(dir, snapshot));
      const int round = eval_round >= 0 ? eval_round
                        : cfg.method == Method::zeroshot ? 0
                                                         : cfg.fed.rounds;
      const MetricsRecord rec = evaluate(cfg, w, snap, round);
      std::ostringstream csv;
      write_metrics_csv(csv, std::span<const MetricsRecord>(&rec, 1));
      out << csv.str();
      if (append) {
        const fs::path path = dir / "metrics.csv";
        const bool fresh = !fs::exists(path);
        auto f = open_out(path, fresh ? std::ios::trunc : std::ios::app);
        const std::string text = csv.str();
        f << (fresh ? text : text.substr(text.find('\n') + 1));
        if (!f) throw IoError("failed writing " + path.string());
      }
    } else if (*pca) {
      const World w = build_world(cfg, dir);
      const PromptCloud cloud = prompt_cloud(cfg, w, load_snapshot(under(dir, snapshot)));
      const PcaResult res = pca_project(cloud.points, 3);
      for (const auto& warning : res.warnings) err << "ftpg: " << warning << '\n';
      auto f = open_out(under(dir, pca_out));
      write_pca_csv(f, cloud, res);
      if (!f) throw IoError("failed writing " + pca_out);
    } else if (*sw) {
      if (rates.empty()) rates.push_back(cfg.fed.participation);
      if (shot_list.empty()) shot_list.push_back(cfg.shots);
      if (per_client.empty()) per_client.push_back(cfg.classes_per_client);
      for (double p : rates)
        for (int s : shot_list)
          for (int n : per_client) {
            ExperimentConfig cell = cfg;
            cell.fed.participation = p;
            cell.shots = s;
            cell.classes_per_client = n;
            cell = resolve(cell);
            const fs::path cell_dir = dir / "sweep" /
                                      (cell_part("p", p) + "_" + cell_part("s", s) + "_" +
                                       cell_part("n", n));
            run_train(cell, cell_dir, out, err);
          }
    }
    return 0;
  } catch (const IoError& e) {
    err << "ftpg: " << e.what() << '\n';
    return 2;
  } catch (const FormatError& e) {
    err << "ftpg: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "ftpg: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace ftpg
