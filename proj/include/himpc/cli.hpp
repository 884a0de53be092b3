#pragma once

// Command-line front end: synth, train, eval, gradcheck, cluster-stats,
// importance-dump. Every command writes into its own run directory
// together with a manifest.json (config snapshot, seed, SHA-256 of inputs
// and outputs).
//
// Exit codes: 0 success, 1 invalid input, 2 numerical failure.

#include "himpc/himpc.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace himpc::cli {

namespace fs = std::filesystem;

inline std::string sha256_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (is.read(buf, sizeof buf) || is.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(is.gcount()));
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    char b[3];
    std::snprintf(b, sizeof b, "%02x", md[i]);
    hex << b;
  }
  return hex.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot write " + path.string());
  os << text;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

/// Output directory of one invocation.
class RunDir {
 public:
  RunDir(const std::string& root, std::string run_id, std::string command) : command_(std::move(command)) {
    if (run_id.empty()) {
      const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
      std::tm tm{};
      gmtime_r(&now, &tm);
      char buf[32];
      std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
      run_id = std::string(buf) + "-" + command_;
      std::string base = run_id;
      for (int k = 2; fs::exists(fs::path(root) / run_id); ++k) run_id = base + "-" + std::to_string(k);
    }
    id_ = run_id;
    path_ = fs::path(root) / run_id;
    fs::create_directories(path_);
  }

  const fs::path& path() const { return path_; }
  fs::path file(const std::string& name) const { return path_ / name; }

  void add_input(const std::string& path) {
    if (!path.empty()) inputs_[path] = sha256_file(path);
  }
  void add_artifact(const std::string& name) { artifacts_[name] = sha256_file(file(name)); }

  void write_manifest(const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json m = {{"command", command_}, {"run_id", id_}, {"inputs", inputs_}, {"artifacts", artifacts_}};
    for (const auto& [k, v] : extra.items()) m[k] = v;
    write_json(file("manifest.json"), m);
  }

 private:
  std::string command_;
  std::string id_;
  fs::path path_;
  std::map<std::string, std::string> inputs_;
  std::map<std::string, std::string> artifacts_;
};

/// Config options shared by train and cluster-stats. Values given on the
/// command line override the --config file, which overrides defaults.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::map<std::string, bool> switches;
  std::map<std::string, CLI::Option*> switch_options;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    const std::vector<std::pair<std::string, std::string>> keyed = {
        {"f", "sequence length F"},
        {"stride", "window stride (0 = F)"},
        {"h", "embedding size"},
        {"m", "meta-transformation heads"},
        {"eps", "DBSCAN radius"},
        {"min-samples", "DBSCAN core threshold"},
        {"lr", "Adam learning rate"},
        {"batch-size", "mini-batch size"},
        {"max-epoch", "epoch limit"},
        {"max-patience", "epochs without improvement before stopping"},
        {"seed", "random seed"},
        {"loss", "himpc, himpc-h or dpc"},
        {"levels", "active levels, e.g. 1,2,3"},
        {"activation", "hidden activation: relu or tanh"},
        {"stop-grad-weights", "hold importance weights constant (true/false)"},
    };
    for (const auto& [k, help] : keyed) options[k] = app->add_option("--" + k, values[k], help);
    for (const std::string k : {"center-root", "heterogeneous-heads", "normalize-instances"})
      switch_options[k] = app->add_flag("--" + k, switches[k]);
  }

  TrainConfig resolve() const {
    TrainConfig c;
    if (!config_path.empty()) c = load_config(config_path);
    for (const auto& [k, opt] : options)
      if (opt->count() > 0) set_config_value(c, k, values.at(k));
    for (const auto& [k, opt] : switch_options)
      if (opt->count() > 0) set_config_value(c, k, "true");
    validate(c);
    return c;
  }
};

struct OutputFlags {
  std::string out_dir = "runs";
  std::string run_id;

  void attach(CLI::App* app) {
    app->add_option("--out-dir", out_dir, "root directory for run folders");
    app->add_option("--run-id", run_id, "run folder name (default: UTC timestamp)");
  }
};

inline std::vector<SkeletonSequence> load_windows(const std::string& path, int joints, int frames, int stride,
                                                  std::ostream& err) {
  const auto raw = parse_sequences(path, joints);
  auto w = window_sequences(raw, frames, stride);
  if (w.skipped > 0) err << path << ": " << w.skipped << " record(s) shorter than " << frames << " frames skipped\n";
  return std::move(w.windows);
}

inline MsmrOptions msmr_options(const TrainConfig& c) { return {c.levels, c.center_root}; }

// ---------------------------------------------------------------------------

inline int cmd_synth(const SyntheticOptions& so, bool split, double probe_fraction, std::uint64_t split_seed,
                     const OutputFlags& out, std::ostream& os) {
  RunDir run(out.out_dir, out.run_id, "synth");
  const auto seqs = generate_synthetic(so);
  write_sequences(run.file("dataset.jsonl").string(), seqs);
  run.add_artifact("dataset.jsonl");
  if (split) {
    const auto s = make_split(seqs, probe_fraction, split_seed);
    write_sequences(run.file("train.jsonl").string(), s.train);
    write_sequences(run.file("probe.jsonl").string(), s.probe);
    write_sequences(run.file("gallery.jsonl").string(), s.gallery);
    for (auto n : {"train.jsonl", "probe.jsonl", "gallery.jsonl"}) run.add_artifact(n);
  }
  run.write_manifest({{"seed", so.seed},
                      {"synthetic",
                       {{"ids", so.n_identities},
                        {"seqs_per_id", so.seqs_per_id},
                        {"f", so.frames},
                        {"j", so.joints},
                        {"noise", so.noise_sigma},
                        {"gait_period", so.gait_period},
                        {"split", split},
                        {"probe_fraction", probe_fraction},
                        {"split_seed", split_seed}}}});
  os << run.path().string() << "\n";
  return 0;
}

inline int cmd_train(const TrainConfig& cfg, const std::string& train_path, const std::string& partitions_path,
                     const std::string& resume, const OutputFlags& out, std::ostream& os, std::ostream& err) {
  TrainState state;
  if (!resume.empty()) {
    state = load_checkpoint(resume);
    if (state.config.max_epoch != cfg.max_epoch || state.config.max_patience != cfg.max_patience) {
      state.config.max_epoch = cfg.max_epoch;
      state.config.max_patience = cfg.max_patience;
      state.finished = state.epoch >= cfg.max_epoch || state.patience >= cfg.max_patience;
    }
  } else {
    const int joints = detect_joint_count(train_path);
    const PartitionSet parts = partitions_path.empty() ? builtin_partitions(joints) : load_partitions(partitions_path);
    state = init_training(cfg, parts);
  }
  const auto& c = state.config;
  const auto windows = load_windows(train_path, state.partitions[0].joints, c.frames, c.window_stride(), err);
  const auto unlabeled = strip_labels(windows);

  RunDir run(out.out_dir, out.run_id, "train");
  run.add_input(train_path);
  run.add_input(partitions_path);
  run.add_input(resume);
  write_text(run.file("config.txt"), config_to_text(c));

  int code = 0;
  try {
    run_epochs(state, unlabeled, -1, [&](const std::string& w) { err << "warning: " << w << "\n"; });
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << "\n";
    code = 2;
  }
  save_checkpoint(run.file("checkpoint.json").string(), state);
  write_json(run.file("train_log.json"), log_to_json(state.log));
  nlohmann::json timing = nlohmann::json::array();
  for (const auto& e : state.log.epochs) timing.push_back({{"epoch", e.epoch}, {"wall_seconds", e.wall_seconds}});
  write_json(run.file("timing.json"), timing);
  for (auto n : {"config.txt", "checkpoint.json", "train_log.json"}) run.add_artifact(n);
  run.write_manifest({{"seed", c.seed}, {"config", config_to_json(c)}, {"epochs", state.epoch}});

  // skipped epochs carry no loss, so the summary only looks at trained ones
  const auto& epochs = state.log.epochs;
  const auto first = std::find_if(epochs.begin(), epochs.end(), [](const auto& e) { return !e.skipped; });
  const auto last = std::find_if(epochs.rbegin(), epochs.rend(), [](const auto& e) { return !e.skipped; });
  if (first != epochs.end())
    os << "epochs " << state.epoch << "  first loss " << first->loss << "  last loss " << last->loss
       << "  best epoch " << state.log.best_epoch << "\n";
  else
    os << "epochs " << state.epoch << "  no epoch produced a loss\n";
  os << run.path().string() << "\n";
  return code;
}

inline int cmd_eval(const std::string& checkpoint, const std::string& probe_path, const std::string& gallery_path,
                    const OutputFlags& out, std::ostream& os, std::ostream& err) {
  const TrainState state = load_checkpoint(checkpoint);
  const auto& c = state.config;
  const int joints = state.partitions[0].joints;
  const auto probe = load_windows(probe_path, joints, c.frames, c.window_stride(), err);
  const auto gallery = load_windows(gallery_path, joints, c.frames, c.window_stride(), err);
  const auto opt = msmr_options(c);
  const auto report = match(embed_sequences(state.params, state.partitions, probe, opt),
                            embed_sequences(state.params, state.partitions, gallery, opt));

  RunDir run(out.out_dir, out.run_id, "eval");
  for (const auto& p : {checkpoint, probe_path, gallery_path}) run.add_input(p);
  write_json(run.file("report.json"), report_to_json(report));
  write_text(run.file("cmc.csv"), cmc_csv(report));
  run.add_artifact("report.json");
  run.add_artifact("cmc.csv");
  run.write_manifest({{"seed", c.seed}, {"config", config_to_json(c)}});
  os << "r1 " << report.r1 << "  r5 " << report.r5 << "  r10 " << report.r10 << "  mAP " << report.map << "\n";
  os << run.path().string() << "\n";
  return 0;
}

inline int cmd_gradcheck(std::uint64_t seed, int sets, int probes, double fd_eps, int embed, int heads,
                         const OutputFlags& out, std::ostream& os) {
  nlohmann::json results = nlohmann::json::array();
  double worst = 0.0;
  for (int k = 0; k < sets; ++k) {
    const auto r = check_loss_gradients(seed + static_cast<std::uint64_t>(k), probes, fd_eps, embed, heads);
    worst = std::max(worst, r.worst());
    auto j = grad_report_json(r);
    j["seed"] = seed + static_cast<std::uint64_t>(k);
    results.push_back(j);
  }
  constexpr double kTolerance = 1e-4;
  RunDir run(out.out_dir, out.run_id, "gradcheck");
  write_json(run.file("gradcheck.json"), {{"max_rel_error", worst}, {"tolerance", kTolerance}, {"sets", results}});
  run.add_artifact("gradcheck.json");
  run.write_manifest({{"seed", seed}, {"fd_eps", fd_eps}, {"probes", probes}, {"h", embed}, {"m", heads}});
  os << "max relative error " << worst << (worst < kTolerance ? "  ok" : "  FAILED") << "\n";
  return worst < kTolerance ? 0 : 2;
}

inline int cmd_cluster_stats(const TrainConfig& cfg, const std::string& data_path, const std::string& checkpoint,
                             const std::vector<double>& sweep, const OutputFlags& out, std::ostream& os,
                             std::ostream& err) {
  TrainState state;
  if (!checkpoint.empty()) {
    state = load_checkpoint(checkpoint);
    state.config.eps = cfg.eps;
    state.config.min_samples = cfg.min_samples;
    state.config.normalize_instances = cfg.normalize_instances;
  } else {
    state = init_training(cfg, builtin_partitions(detect_joint_count(data_path)));
  }
  const auto& c = state.config;
  const auto windows = load_windows(data_path, state.partitions[0].joints, c.frames, c.window_stride(), err);
  const auto unlabeled = strip_labels(windows);
  const TrainingData data = prepare_training_data(unlabeled, c, state.partitions);

  std::array<Matrix, kLevels> instances;
  for (int l = 0; l < kLevels; ++l) instances[l] = encode_instances(state.params, data, l);

  nlohmann::json runs = nlohmann::json::array();
  const std::vector<double> eps_values = sweep.empty() ? std::vector<double>{c.eps} : sweep;
  for (double eps : eps_values) {
    nlohmann::json levels = nlohmann::json::array();
    for (int l = 0; l < kLevels; ++l) {
      if (!c.levels[l]) continue;
      const auto lc = cluster_level(instances[l], eps, c.min_samples, c.normalize_instances);
      auto j = cluster_stats_json(lc.labels);
      j["level"] = l + 1;
      levels.push_back(j);
      os << "eps " << eps << "  level " << (l + 1) << "  clusters " << j["clusters"] << "  outliers "
         << j["outliers"] << "\n";
    }
    runs.push_back({{"eps", eps}, {"min_samples", c.min_samples}, {"levels", levels}});
  }

  RunDir run(out.out_dir, out.run_id, "cluster-stats");
  run.add_input(data_path);
  run.add_input(checkpoint);
  write_json(run.file("cluster_stats.json"), {{"sequences", data.sequences}, {"runs", runs}});
  run.add_artifact("cluster_stats.json");
  run.write_manifest({{"seed", c.seed}, {"config", config_to_json(c)}});
  os << run.path().string() << "\n";
  return 0;
}

inline int cmd_importance_dump(const std::string& checkpoint, const std::string& data_path, const OutputFlags& out,
                               std::ostream& os, std::ostream& err) {
  const TrainState state = load_checkpoint(checkpoint);
  const auto& c = state.config;
  require(state.params.heads >= 1, "importance dump needs a model with meta-transformation heads");
  const auto windows = load_windows(data_path, state.partitions[0].joints, c.frames, c.window_stride(), err);
  const auto unlabeled = strip_labels(windows);
  const TrainingData data = prepare_training_data(unlabeled, c, state.partitions);
  const ClusterState cs = cluster_epoch(state, data);

  std::vector<int> all(static_cast<std::size_t>(data.sequences));
  std::iota(all.begin(), all.end(), 0);
  const TrainBatch batch = make_train_batch(data, cs, all);
  const MetaBatch mb = meta_batch(state.params, batch);
  const ImportanceWeights w = importance_weights(mb);

  nlohmann::json levels = nlohmann::json::array();
  std::size_t k = 0;
  for (int l = 0; l < kLevels; ++l) {
    if (batch.levels[l].sequences() == 0) continue;
    const auto& ml = mb.levels[k];
    std::vector<int> members;
    for (int i = 0; i < data.sequences; ++i)
      if (cs.levels[l].labels[static_cast<std::size_t>(i)] != kOutlier) members.push_back(i);
    nlohmann::json seqs = nlohmann::json::array();
    for (int b = 0; b < ml.sequences(); ++b) {
      nlohmann::json heads = nlohmann::json::array();
      for (int m = 0; m < ml.heads(); ++m) {
        const Matrix& protos = ml.prototypes[static_cast<std::size_t>(m)];
        const int y = predict_cluster(ml.instances[static_cast<std::size_t>(m)].row(b), protos);
        const Matrix frames = ml.frame_feats[static_cast<std::size_t>(m)].middleRows(b * ml.frames, ml.frames);
        const Vector cert = frame_certainty(frames, protos.row(y));
        const Eigen::RowVectorXd imp = w.levels[k][static_cast<std::size_t>(m)].row(b);
        heads.push_back({{"head", m},
                         {"predicted", y},
                         {"certainty", std::vector<double>(cert.data(), cert.data() + cert.size())},
                         {"importance", std::vector<double>(imp.data(), imp.data() + imp.size())}});
      }
      const int idx = members[static_cast<std::size_t>(b)];
      seqs.push_back({{"seq_id", windows[static_cast<std::size_t>(idx)].seq_id},
                      {"cluster", ml.labels[static_cast<std::size_t>(b)]},
                      {"heads", heads}});
    }
    levels.push_back({{"level", l + 1}, {"clusters", cs.levels[l].clusters()}, {"sequences", seqs}});
    ++k;
  }

  RunDir run(out.out_dir, out.run_id, "importance-dump");
  run.add_input(checkpoint);
  run.add_input(data_path);
  write_json(run.file("importance.json"), {{"frames", c.frames}, {"levels", levels}});
  run.add_artifact("importance.json");
  run.write_manifest({{"seed", c.seed}, {"config", config_to_json(c)}});
  os << run.path().string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& os = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Skeleton sequence re-identification toolkit"};
  app.require_subcommand(1, 1);
  app.set_help_flag("--help", "print help");  // -h is taken by the embedding-size flag

  OutputFlags out;

  SyntheticOptions so;
  bool split = false;
  double probe_fraction = 0.0;
  std::uint64_t split_seed = 0;
  auto* synth = app.add_subcommand("synth", "generate a synthetic gait dataset");
  synth->add_option("--ids", so.n_identities, "number of identities");
  synth->add_option("--seqs-per-id", so.seqs_per_id, "sequences per identity");
  synth->add_option("--f", so.frames, "frames per sequence");
  synth->add_option("--j", so.joints, "joints per skeleton (14, 20, 25)");
  synth->add_option("--noise", so.noise_sigma, "per-coordinate Gaussian jitter (m)");
  synth->add_option("--seed", so.seed, "random seed");
  synth->add_option("--gait-period", so.gait_period, "frames per gait cycle (0 = f)");
  synth->add_flag("--split", split, "also write train/probe/gallery files");
  synth->add_option("--probe-fraction", probe_fraction, "probe share of each identity's sequences");
  synth->add_option("--split-seed", split_seed, "seed of the split");
  out.attach(synth);

  ConfigFlags train_flags;
  std::string train_path, partitions_path, resume;
  auto* train_cmd = app.add_subcommand("train", "train encoders and heads on unlabeled sequences");
  train_cmd->add_option("--train", train_path, "training sequences (JSON lines)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--partitions", partitions_path, "custom partition table")->check(CLI::ExistingFile);
  train_cmd->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  train_flags.attach(train_cmd);
  out.attach(train_cmd);

  std::string checkpoint, probe_path, gallery_path;
  auto* eval_cmd = app.add_subcommand("eval", "match probe against gallery");
  eval_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--probe", probe_path, "probe sequences")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--gallery", gallery_path, "gallery sequences")->required()->check(CLI::ExistingFile);
  out.attach(eval_cmd);

  std::uint64_t gc_seed = 0;
  int gc_sets = 3, gc_probes = 200, gc_h = 16, gc_m = 2;
  double gc_eps = 1e-5;
  auto* gc = app.add_subcommand("gradcheck", "compare backward gradients with finite differences");
  gc->add_option("--seed", gc_seed, "first seed");
  gc->add_option("--sets", gc_sets, "number of seeded parameter sets");
  gc->add_option("--probes", gc_probes, "scalar parameters probed per loss");
  gc->add_option("--fd-eps", gc_eps, "finite-difference step");
  gc->add_option("--h", gc_h, "embedding size");
  gc->add_option("--m", gc_m, "heads");
  out.attach(gc);

  ConfigFlags cs_flags;
  std::string cs_data, cs_checkpoint;
  std::vector<double> sweep;
  auto* cs = app.add_subcommand("cluster-stats", "cluster sizes and outliers per level");
  cs->add_option("--data", cs_data, "sequences to cluster")->required()->check(CLI::ExistingFile);
  cs->add_option("--checkpoint", cs_checkpoint, "encode with a trained model")->check(CLI::ExistingFile);
  cs->add_option("--eps-sweep", sweep, "several eps values")->delimiter(',');
  cs_flags.attach(cs);
  out.attach(cs);

  std::string id_checkpoint, id_data;
  auto* idump = app.add_subcommand("importance-dump", "per-frame importance of every clustered sequence");
  idump->add_option("--checkpoint", id_checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  idump->add_option("--data", id_data, "sequences")->required()->check(CLI::ExistingFile);
  out.attach(idump);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    os << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (*synth) return cmd_synth(so, split, probe_fraction, split_seed, out, os);
    if (*train_cmd) return cmd_train(train_flags.resolve(), train_path, partitions_path, resume, out, os, err);
    if (*eval_cmd) return cmd_eval(checkpoint, probe_path, gallery_path, out, os, err);
    if (*gc) return cmd_gradcheck(gc_seed, gc_sets, gc_probes, gc_eps, gc_h, gc_m, out, os);
    if (*cs) return cmd_cluster_stats(cs_flags.resolve(), cs_data, cs_checkpoint, sweep, out, os, err);
    if (*idump) return cmd_importance_dump(id_checkpoint, id_data, out, os, err);
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace himpc::cli
