#pragma once

// Command-line front end. Every command reads one flat JSON config (optional),
// applies command-line overrides on top, and writes its outputs plus a
// manifest.json into the output directory.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "skelnet/skelnet.hpp"

namespace skelnet::cli {

inline constexpr std::string_view kVersion = "0.1.0";
inline constexpr int kConfigFormatVersion = 1;

using json = nlohmann::json;

struct RunConfig {
  int format_version = kConfigFormatVersion;
  std::string input;
  std::string out = "out";
  std::string checkpoint;
  std::uint64_t seed = 3407;

  std::size_t synth_n_per_class = 25;
  std::size_t synth_frames = 125;
  int synth_fps = 25;

  PreprocessOptions preprocess{kDefaultConfidenceThreshold, 15, kClipFrames, kClipFrames};

  double split_train = 0.8;
  double split_val = 0.1;
  double split_test = 0.1;
  bool group_by_video = true;

  net::ModelConfig model;
  train::TrainConfig train;

  std::size_t k = 5;
  std::size_t n_boot = 1000;
  double cv_validation_fraction = 0.1;

  std::vector<double> grid_alpha{0.1, 0.5, 0.9};
  std::vector<double> grid_gamma{0, 1, 2, 3, 5};
  std::vector<double> grid_learning_rate{1e-3, 1e-4};
  std::vector<double> grid_weight_decay{1e-3, 1e-4, 1e-5};

  std::vector<int> sweep_fps{5, 10, 15, 20, 25};

  viz::VizConfig viz;
  std::size_t viz_clip = 0;
  std::size_t viz_threads = 1;
};

// ---------------------------------------------------------------------------
// Flat key table

struct Field {
  std::string key;
  std::string doc;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

namespace detail {

template <class T>
T convert(const json& j, const std::string& key) {
  auto bad = [&](const char* what) {
    return ConfigError("config key '" + key + "' expects " + what + ", got " + j.dump());
  };
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) throw bad("a boolean");
    return j.get<bool>();
  } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
    if (!j.is_number_unsigned()) throw bad("a non-negative integer");
    return j.get<T>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) throw bad("an integer");
    return j.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) throw bad("a number");
    return j.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) throw bad("a string");
    return j.get<std::string>();
  } else {
    if (!j.is_array() || j.empty()) throw bad("a non-empty array");
    T out;
    for (const auto& e : j) out.push_back(convert<typename T::value_type>(e, key));
    return out;
  }
}

template <class Access>
Field field(std::string key, std::string doc, Access access) {
  using T = std::remove_cvref_t<decltype(access(std::declval<RunConfig&>()))>;
  return {key, std::move(doc),
          [access](const RunConfig& c) { return json(access(const_cast<RunConfig&>(c))); },
          [access, key](RunConfig& c, const json& j) { access(c) = convert<T>(j, key); }};
}

template <class E>
Field enum_field(std::string key, std::string doc, std::vector<std::pair<E, std::string>> names,
                 std::function<E&(RunConfig&)> access) {
  return {key, std::move(doc),
          [access, names](const RunConfig& c) {
            const E v = access(const_cast<RunConfig&>(c));
            for (const auto& [e, n] : names)
              if (e == v) return json(n);
            return json();
          },
          [access, names, key](RunConfig& c, const json& j) {
            const auto s = convert<std::string>(j, key);
            for (const auto& [e, n] : names)
              if (n == s) {
                access(c) = e;
                return;
              }
            throw ConfigError("config key '" + key + "' has unknown value '" + s + "'");
          }};
}

}  // namespace detail

inline const std::vector<Field>& fields() {
  using detail::field;
  using C = RunConfig;
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(field("format_version", "config format version (must be 1)",
                      [](C& c) -> auto& { return c.format_version; }));
    f.push_back(field("input", "input file or directory",
                      [](C& c) -> auto& { return c.input; }));
    f.push_back(field("out", "output directory", [](C& c) -> auto& { return c.out; }));
    f.push_back(field("checkpoint", "model checkpoint (eval, viz)",
                      [](C& c) -> auto& { return c.checkpoint; }));
    f.push_back(field("seed", "master seed for data, splits, init and training",
                      [](C& c) -> auto& { return c.seed; }));

    f.push_back(field("synth_n_per_class", "synthetic sequences per class",
                      [](C& c) -> auto& { return c.synth_n_per_class; }));
    f.push_back(field("synth_frames", "frames per synthetic sequence",
                      [](C& c) -> auto& { return c.synth_frames; }));
    f.push_back(field("synth_fps", "frame rate of synthetic sequences",
                      [](C& c) -> auto& { return c.synth_fps; }));

    f.push_back(field("confidence_threshold", "keypoints below this confidence are replaced",
                      [](C& c) -> auto& { return c.preprocess.confidence_threshold; }));
    f.push_back(field("target_fps", "frame-rate target (0 keeps the source rate)",
                      [](C& c) -> auto& { return c.preprocess.target_fps; }));
    f.push_back(field("window_length", "frames per clip",
                      [](C& c) -> auto& { return c.preprocess.window_length; }));
    f.push_back(field("window_stride", "frames between clip starts",
                      [](C& c) -> auto& { return c.preprocess.window_stride; }));

    f.push_back(field("split_train", "training share of the hold-out split",
                      [](C& c) -> auto& { return c.split_train; }));
    f.push_back(field("split_val", "validation share of the hold-out split",
                      [](C& c) -> auto& { return c.split_val; }));
    f.push_back(field("split_test", "test share of the hold-out split",
                      [](C& c) -> auto& { return c.split_test; }));
    f.push_back(field("group_by_video", "keep all clips of a video in one subset or fold",
                      [](C& c) -> auto& { return c.group_by_video; }));

    f.push_back(field("n_part", "part encoder width", [](C& c) -> auto& { return c.model.n_part; }));
    f.push_back(field("n_graph_out", "graph convolution output width",
                      [](C& c) -> auto& { return c.model.n_graph_out; }));
    f.push_back(field("spatial_out", "spatial head width",
                      [](C& c) -> auto& { return c.model.spatial_out; }));
    f.push_back(field("n_rnn", "LSTM hidden size per direction",
                      [](C& c) -> auto& { return c.model.n_rnn; }));
    f.push_back(field("n_rnn_layers", "stacked bidirectional LSTM layers",
                      [](C& c) -> auto& { return c.model.n_rnn_layers; }));
    f.push_back(field("n_rnn_out", "temporal output width",
                      [](C& c) -> auto& { return c.model.n_rnn_out; }));
    f.push_back(field("fusion_width", "fused token width (divisible by n_heads)",
                      [](C& c) -> auto& { return c.model.fusion_width; }));
    f.push_back(field("n_heads", "attention heads in the fusion block",
                      [](C& c) -> auto& { return c.model.n_heads; }));
    f.push_back(field("head_hidden", "classifier hidden width",
                      [](C& c) -> auto& { return c.model.head_hidden; }));
    f.push_back(field("dropout_p", "dropout probability",
                      [](C& c) -> auto& { return c.model.dropout_p; }));
    f.push_back(field("gcn_self_loops", "add self loops to the part graph",
                      [](C& c) -> auto& { return c.model.gcn_self_loops; }));
    f.push_back(field("gcn_init_const", "initial value of every graph convolution weight",
                      [](C& c) -> auto& { return c.model.gcn_init_const; }));
    f.push_back(field("leaky_slope", "leaky ReLU negative slope",
                      [](C& c) -> auto& { return c.model.leaky_slope; }));
    f.push_back(field("bn_momentum", "batch-norm running statistics momentum",
                      [](C& c) -> auto& { return c.model.bn_momentum; }));
    f.push_back(field("bn_epsilon", "batch-norm variance epsilon",
                      [](C& c) -> auto& { return c.model.bn_epsilon; }));

    f.push_back(field("alpha", "focal loss class weight", [](C& c) -> auto& { return c.train.alpha; }));
    f.push_back(detail::enum_field<train::AlphaTarget>(
        "alpha_applies_to", "class receiving alpha: negative (chorea) or positive (dystonia)",
        {{train::AlphaTarget::Negative, "negative"}, {train::AlphaTarget::Positive, "positive"}},
        [](C& c) -> train::AlphaTarget& { return c.train.alpha_applies_to; }));
    f.push_back(field("gamma", "focal loss focusing exponent",
                      [](C& c) -> auto& { return c.train.gamma; }));
    f.push_back(field("learning_rate", "Adam step size",
                      [](C& c) -> auto& { return c.train.learning_rate; }));
    f.push_back(field("weight_decay", "L2 coefficient on weight matrices",
                      [](C& c) -> auto& { return c.train.weight_decay; }));
    f.push_back(field("max_epochs", "epoch limit", [](C& c) -> auto& { return c.train.max_epochs; }));
    f.push_back(field("patience", "early-stopping patience in epochs",
                      [](C& c) -> auto& { return c.train.patience; }));
    f.push_back(field("improvement_threshold", "minimum validation-loss decrease that resets patience",
                      [](C& c) -> auto& { return c.train.improvement_threshold; }));
    f.push_back(field("clip_max_norm", "global gradient-norm limit",
                      [](C& c) -> auto& { return c.train.clip_max_norm; }));
    f.push_back(field("batch_size", "mini-batch size",
                      [](C& c) -> auto& { return c.train.batch_size; }));
    f.push_back(field("augment_flip", "random horizontal flips during training",
                      [](C& c) -> auto& { return c.train.augment_flip; }));
    f.push_back(field("scheduler_factor", "learning-rate reduction factor on plateau",
                      [](C& c) -> auto& { return c.train.scheduler.factor; }));
    f.push_back(field("scheduler_patience", "plateau epochs before reducing the learning rate",
                      [](C& c) -> auto& { return c.train.scheduler.patience_epochs; }));
    f.push_back(field("scheduler_min_lr", "learning-rate floor",
                      [](C& c) -> auto& { return c.train.scheduler.min_lr; }));

    f.push_back(field("k", "cross-validation folds", [](C& c) -> auto& { return c.k; }));
    f.push_back(field("n_boot", "bootstrap resamples for confidence intervals",
                      [](C& c) -> auto& { return c.n_boot; }));
    f.push_back(field("cv_validation_fraction", "early-stopping share carved from training folds",
                      [](C& c) -> auto& { return c.cv_validation_fraction; }));

    f.push_back(field("grid_alpha", "grid values for alpha",
                      [](C& c) -> auto& { return c.grid_alpha; }));
    f.push_back(field("grid_gamma", "grid values for gamma",
                      [](C& c) -> auto& { return c.grid_gamma; }));
    f.push_back(field("grid_learning_rate", "grid values for learning_rate",
                      [](C& c) -> auto& { return c.grid_learning_rate; }));
    f.push_back(field("grid_weight_decay", "grid values for weight_decay",
                      [](C& c) -> auto& { return c.grid_weight_decay; }));

    f.push_back(field("sweep_fps", "frame-rate targets for the sweep command",
                      [](C& c) -> auto& { return c.sweep_fps; }));

    f.push_back(field("gaussian_sigma", "attention smoothing sigma in frames",
                      [](C& c) -> auto& { return c.viz.gaussian_sigma; }));
    f.push_back(field("temporal_window", "attention moving-average width in frames (odd)",
                      [](C& c) -> auto& { return c.viz.temporal_window; }));
    f.push_back(field("clamp_low", "lower clamp percentile",
                      [](C& c) -> auto& { return c.viz.clamp_low; }));
    f.push_back(field("clamp_high", "upper clamp percentile",
                      [](C& c) -> auto& { return c.viz.clamp_high; }));
    f.push_back(field("image_size", "rendered canvas size in pixels",
                      [](C& c) -> auto& { return c.viz.image_size; }));
    f.push_back(detail::enum_field<viz::Aggregation>(
        "aggregation", "part score aggregation: row_and_column or row_only",
        {{viz::Aggregation::RowAndColumn, "row_and_column"}, {viz::Aggregation::RowOnly, "row_only"}},
        [](C& c) -> viz::Aggregation& { return c.viz.aggregation; }));
    f.push_back(field("viz_clip", "clip index to render",
                      [](C& c) -> auto& { return c.viz_clip; }));
    f.push_back(field("viz_threads", "render worker threads",
                      [](C& c) -> auto& { return c.viz_threads; }));
    return f;
  }();
  return table;
}

inline json to_json(const RunConfig& c) {
  json j = json::object();
  for (const auto& f : fields()) j[f.key] = f.get(c);
  return j;
}

/// Applies every key of a flat object; unknown keys are rejected.
inline void apply_config(RunConfig& c, const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    auto it = std::find_if(fields().begin(), fields().end(),
                           [&](const Field& f) { return f.key == key; });
    if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
    it->set(c, value);
  }
}

inline void validate(const RunConfig& c) {
  if (c.format_version != kConfigFormatVersion)
    throw ConfigError("unsupported config format_version " + std::to_string(c.format_version));
  c.model.validate();
  c.train.validate();
  c.viz.validate();
  if (c.k < 2) throw ConfigError("k must be at least 2");
  if (c.n_boot < 1) throw ConfigError("n_boot must be at least 1");
  if (c.synth_fps <= 0 || c.synth_n_per_class < 1) throw ConfigError("synthetic settings must be positive");
  if (c.preprocess.target_fps < 0) throw ConfigError("target_fps must be non-negative");
  for (int f : c.sweep_fps)
    if (f <= 0) throw ConfigError("sweep_fps entries must be positive");
  for (double r : {c.split_train, c.split_val, c.split_test})
    if (r < 0.0) throw ConfigError("split ratios must be non-negative");
  if (std::abs(c.split_train + c.split_val + c.split_test - 1.0) > 1e-9)
    throw ConfigError("split ratios must sum to 1");
  if (!(c.cv_validation_fraction > 0.0 && c.cv_validation_fraction < 1.0))
    throw ConfigError("cv_validation_fraction must lie in (0, 1)");
}

inline json read_json_file(const std::filesystem::path& path, bool config) {
  std::ifstream in(path);
  if (!in) {
    if (config) throw ConfigError("cannot open config " + path.string());
    throw DataError("cannot open " + path.string());
  }
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    if (config) throw ConfigError(path.string() + ": " + e.what());
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Manifests

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(ss.str())));
  return buf;
}

struct Run {
  std::string command;
  RunConfig config;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
  json seeds = json::object();
  bool verbose = false;
  std::ostream* log = &std::cerr;

  std::filesystem::path out_dir() const { return config.out; }

  std::filesystem::path output(const std::string& name) {
    auto p = out_dir() / name;
    outputs.push_back(p);
    return p;
  }
};

inline json manifest_json(const Run& run) {
  json inputs = json::array(), outputs = json::array();
  for (const auto& p : run.inputs) inputs.push_back({{"path", p.string()}, {"fnv1a64", file_hash(p)}});
  for (const auto& p : run.outputs) {
    if (std::filesystem::is_regular_file(p))
      outputs.push_back({{"path", p.string()}, {"fnv1a64", file_hash(p)}});
  }
  return {{"format_version", kConfigFormatVersion},
          {"command", run.command},
          {"config", to_json(run.config)},
          {"seeds", run.seeds},
          {"inputs", inputs},
          {"outputs", outputs},
          {"versions",
           {{"skelnet", std::string(kVersion)},
            {"checkpoint_format", net::kCheckpointFormatVersion},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                          "." + std::to_string(EIGEN_MINOR_VERSION)},
            {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

inline void ensure_out_dir(const Run& run) {
  std::error_code ec;
  std::filesystem::create_directories(run.out_dir(), ec);
  if (ec || !std::filesystem::is_directory(run.out_dir()))
    throw DataError("cannot create output directory " + run.out_dir().string());
}

// ---------------------------------------------------------------------------
// Shared steps

inline std::filesystem::path require_input(const RunConfig& c) {
  if (c.input.empty()) throw ConfigError("no input given (use --input or the 'input' key)");
  return c.input;
}

/// A clip archive path, or a directory holding `clips.ndjson`.
inline std::vector<SkeletonClip> load_clips(Run& run) {
  auto path = require_input(run.config);
  if (std::filesystem::is_directory(path)) path /= "clips.ndjson";
  run.inputs.push_back(path);
  auto clips = read_clip_archive(path);
  if (clips.empty()) throw DataError(path.string() + " holds no clips");
  return clips;
}

inline std::vector<std::filesystem::path> sequence_files(const std::filesystem::path& input) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(input)) {
    for (const auto& e : std::filesystem::directory_iterator(input))
      if (e.is_regular_file() && e.path().extension() == ".ndjson") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else if (std::filesystem::is_regular_file(input)) {
    files.push_back(input);
  } else {
    throw DataError("input " + input.string() + " does not exist");
  }
  if (files.empty()) throw DataError("no .ndjson sequences in " + input.string());
  return files;
}

struct PreprocessResult {
  std::vector<SkeletonClip> clips;
  std::vector<std::string> notices;
};

inline PreprocessResult preprocess_files(const std::vector<std::filesystem::path>& files,
                                         const PreprocessOptions& opt) {
  PreprocessResult r;
  for (const auto& f : files) {
    auto seq = parse_sequence(f);
    if (seq.video_id.empty()) seq.video_id = f.stem().string();
    auto w = preprocess(seq, opt);
    if (w.skipped) r.notices.push_back(w.notice);
    for (auto& c : w.clips) r.clips.push_back(std::move(c));
  }
  return r;
}

inline train::TrainConfig seeded_train_config(const RunConfig& c) {
  auto t = c.train;
  t.seed = c.seed;
  return t;
}

inline train::EpochCallback epoch_logger(const Run& run, std::string prefix) {
  if (!run.verbose) return {};
  return [log = run.log, prefix = std::move(prefix)](const train::EpochRecord& e) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%sepoch=%zu train_loss=%.6g val_loss=%.6g val_acc=%.4f lr=%.3g\n",
                  prefix.c_str(), e.epoch, e.train_loss, e.val_loss, e.val_acc, e.lr);
    *log << buf << std::flush;
  };
}

inline std::vector<SkeletonClip> balanced(const std::vector<SkeletonClip>& clips, std::uint64_t seed) {
  const auto cc = class_counts(clips);
  return cc[0] > 0 && cc[1] > 0 ? bootstrap_oversample(clips, seed) : clips;
}

struct HoldoutResult {
  train::TrainResult trained;
  DatasetSplit split;
  eval::ConfusionMatrix confusion;
  eval::Metrics metrics;
};

/// Stratified train/validation/test split, oversampled training, test metrics.
inline HoldoutResult train_holdout(const std::vector<SkeletonClip>& clips, const RunConfig& c,
                                   const train::EpochCallback& on_epoch) {
  HoldoutResult r{{}, stratified_split(clips, {c.split_train, c.split_val, c.split_test}, c.seed,
                                       c.group_by_video),
                  {}, {}};
  if (r.split.validation.empty()) throw DataError("validation subset is empty");
  auto train_set = balanced(r.split.train, c.seed);
  auto val_set = balanced(r.split.validation, c.seed + 1);
  r.trained = train::train(c.model, seeded_train_config(c), train_set, val_set, on_epoch);
  if (!r.split.test.empty()) {
    auto recs = net::predict(r.trained.params, r.split.test);
    std::vector<Label> preds, labels;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      preds.push_back(recs[i].predicted);
      labels.push_back(r.split.test[i].label);
    }
    r.confusion = eval::confusion(preds, labels);
    r.metrics = eval::metrics(r.confusion);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Commands

inline void cmd_synth(Run& run) {
  const auto& c = run.config;
  ensure_out_dir(run);
  synth::DatasetOptions opt{c.synth_n_per_class, c.synth_frames, c.synth_fps, c.seed};
  run.seeds["synth"] = c.seed;
  for (auto& p : synth::generate_dataset(opt, run.out_dir())) run.outputs.push_back(std::move(p));
}

inline void cmd_preprocess(Run& run) {
  const auto files = sequence_files(require_input(run.config));
  run.inputs = files;
  auto r = preprocess_files(files, run.config.preprocess);
  for (const auto& n : r.notices) *run.log << "notice " << n << '\n';
  if (r.clips.empty()) throw DataError("preprocessing produced no clips");
  ensure_out_dir(run);
  write_clip_archive(run.output("clips.ndjson"), r.clips);
  const auto cc = class_counts(r.clips);
  json report = {{"clips", r.clips.size()},
                 {"chorea", cc[0]},
                 {"dystonia", cc[1]},
                 {"sequences", files.size()},
                 {"target_fps", run.config.preprocess.target_fps},
                 {"skipped", r.notices}};
  write_text(run.output("preprocess.json"), report.dump(2) + "\n");
}

inline json holdout_report(const HoldoutResult& r) {
  return {{"split",
           {{"train", r.split.train.size()},
            {"validation", r.split.validation.size()},
            {"test", r.split.test.size()}}},
          {"best_epoch", r.trained.history.best_epoch},
          {"stop_epoch", r.trained.history.stop_epoch},
          {"stop_reason", r.trained.history.stop_reason},
          {"test_confusion", eval::to_json(r.confusion)},
          {"test_metrics", eval::to_json(r.metrics)}};
}

inline void cmd_train(Run& run) {
  const auto clips = load_clips(run);
  ensure_out_dir(run);
  run.seeds["split"] = run.config.seed;
  run.seeds["train"] = run.config.seed;
  auto r = train_holdout(clips, run.config, epoch_logger(run, ""));
  net::save_checkpoint(run.output("checkpoint.json"), r.trained.params);
  train::write_history_csv(run.output("history.csv"), r.trained.history);
  write_text(run.output("report.json"), holdout_report(r).dump(2) + "\n");
  if (!r.split.test.empty()) *run.log << eval::format_confusion(r.confusion);
}

inline void cmd_eval(Run& run) {
  const auto clips = load_clips(run);
  if (run.config.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  run.inputs.push_back(run.config.checkpoint);
  const auto params = net::load_checkpoint(run.config.checkpoint);
  ensure_out_dir(run);
  const auto recs = net::predict(params, clips);
  std::vector<Label> preds, labels;
  std::string csv = "index,video_id,start_frame,label,predicted,p_dystonia\n";
  char buf[256];
  for (std::size_t i = 0; i < clips.size(); ++i) {
    preds.push_back(recs[i].predicted);
    labels.push_back(clips[i].label);
    std::snprintf(buf, sizeof buf, "%zu,%s,%zu,%d,%d,%.17g\n", i, clips[i].source.video_id.c_str(),
                  clips[i].source.start_frame, to_int(clips[i].label), to_int(recs[i].predicted),
                  recs[i].probabilities[1]);
    csv += buf;
  }
  const auto cm = eval::confusion(preds, labels);
  write_text(run.output("predictions.csv"), csv);
  write_text(run.output("eval.json"),
             json{{"confusion", eval::to_json(cm)}, {"metrics", eval::to_json(eval::metrics(cm))}}
                     .dump(2) +
                 "\n");
  *run.log << eval::format_confusion(cm);
}

inline void cmd_cv(Run& run) {
  const auto clips = load_clips(run);
  ensure_out_dir(run);
  const auto& c = run.config;
  eval::CvOptions opt{c.k, c.n_boot, c.seed, c.group_by_video, c.cv_validation_fraction};
  run.seeds["folds"] = c.seed;
  run.seeds["fold_training"] = "seed + fold index";
  run.seeds["bootstrap"] = "seed + metric index";
  const auto report = eval::cross_validate(clips, c.model, seeded_train_config(c), opt,
                                           epoch_logger(run, "cv "));
  write_text(run.output("cv_report.json"), eval::to_json(report).dump(2) + "\n");
  const auto table = eval::format_table(report.summary);
  write_text(run.output("cv_table.txt"), table);
  *run.log << table;
}

inline void cmd_grid(Run& run) {
  const auto clips = load_clips(run);
  ensure_out_dir(run);
  const auto& c = run.config;
  auto split = stratified_split(clips, {c.split_train, c.split_val, c.split_test}, c.seed,
                                c.group_by_video);
  if (split.validation.empty()) throw DataError("validation subset is empty");
  const auto train_set = balanced(split.train, c.seed);
  const auto val_set = balanced(split.validation, c.seed + 1);
  run.seeds["split"] = c.seed;
  run.seeds["train"] = c.seed;

  std::string csv = "index,alpha,gamma,learning_rate,weight_decay,val_accuracy,val_loss,best_epoch\n";
  json cells = json::array();
  std::size_t index = 0, best_index = 0;
  double best_acc = -1.0;
  char buf[256];
  for (double alpha : c.grid_alpha)
    for (double gamma : c.grid_gamma)
      for (double lr : c.grid_learning_rate)
        for (double wd : c.grid_weight_decay) {
          auto tc = seeded_train_config(c);
          tc.alpha = alpha;
          tc.gamma = gamma;
          tc.learning_rate = lr;
          tc.weight_decay = wd;
          auto trained = train::train(c.model, tc, train_set, val_set,
                                      epoch_logger(run, "grid[" + std::to_string(index) + "] "));
          const auto val = train::evaluate(trained.params, split.validation, tc);
          if (val.accuracy > best_acc) {
            best_acc = val.accuracy;
            best_index = index;
          }
          std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu\n", index,
                        alpha, gamma, lr, wd, val.accuracy, val.loss, trained.history.best_epoch);
          csv += buf;
          cells.push_back({{"index", index},
                           {"alpha", alpha},
                           {"gamma", gamma},
                           {"learning_rate", lr},
                           {"weight_decay", wd},
                           {"val_accuracy", val.accuracy},
                           {"val_loss", val.loss}});
          ++index;
        }
  write_text(run.output("grid.csv"), csv);
  write_text(run.output("grid.json"),
             json{{"cells", cells}, {"best", cells[best_index]}}.dump(2) + "\n");
  *run.log << "best cell " << cells[best_index].dump() << '\n';
}

inline void cmd_sweep(Run& run) {
  const auto files = sequence_files(require_input(run.config));
  run.inputs = files;
  ensure_out_dir(run);
  run.seeds["split"] = run.config.seed;
  run.seeds["train"] = run.config.seed;
  std::string csv = "fps,clips,accuracy,f1,sensitivity,specificity\n";
  char buf[256];
  std::size_t skipped = 0;
  for (int fps : run.config.sweep_fps) {
    RunConfig c = run.config;
    c.preprocess.target_fps = fps;
    auto pre = preprocess_files(files, c.preprocess);
    for (const auto& n : pre.notices) *run.log << "notice fps=" << fps << ' ' << n << '\n';
    const auto counts = class_counts(pre.clips);
    if (counts[0] == 0 || counts[1] == 0) {
      // Short sequences can leave a rate without windows for one class; keep
      // the row so the table still lists every requested rate.
      *run.log << "notice fps=" << fps << " skipped: " << counts[0] << " chorea and " << counts[1]
               << " dystonia clips\n";
      std::snprintf(buf, sizeof buf, "%d,%zu,,,,\n", fps, pre.clips.size());
      csv += buf;
      ++skipped;
      continue;
    }
    auto r = train_holdout(pre.clips, c, epoch_logger(run, "fps=" + std::to_string(fps) + " "));
    std::snprintf(buf, sizeof buf, "%d,%zu,%.17g,%.17g,%.17g,%.17g\n", fps, pre.clips.size(),
                  r.metrics.accuracy, r.metrics.f1, r.metrics.sensitivity, r.metrics.specificity);
    csv += buf;
  }
  if (skipped == run.config.sweep_fps.size())
    throw DataError("no frame rate produced clips of both classes");
  write_text(run.output("sweep.csv"), csv);
  *run.log << csv;
}

inline void cmd_viz(Run& run) {
  const auto clips = load_clips(run);
  if (run.config.checkpoint.empty()) throw ConfigError("viz needs --checkpoint");
  run.inputs.push_back(run.config.checkpoint);
  const auto params = net::load_checkpoint(run.config.checkpoint);
  if (run.config.viz_clip >= clips.size())
    throw DataError("clip index " + std::to_string(run.config.viz_clip) + " out of range (" +
                    std::to_string(clips.size()) + " clips)");
  const auto& clip = clips[run.config.viz_clip];
  const auto record = net::model_forward(clip, params).second;
  ensure_out_dir(run);
  auto r = viz::render_clip(clip, record, run.config.viz, run.out_dir(), run.config.viz_threads);
  for (auto& p : r.frames) run.outputs.push_back(std::move(p));
  run.outputs.push_back(r.export_path);
}

inline void dispatch(Run& run) {
  validate(run.config);
  if (run.command == "synth") cmd_synth(run);
  else if (run.command == "preprocess") cmd_preprocess(run);
  else if (run.command == "train") cmd_train(run);
  else if (run.command == "eval") cmd_eval(run);
  else if (run.command == "cv") cmd_cv(run);
  else if (run.command == "grid") cmd_grid(run);
  else if (run.command == "sweep") cmd_sweep(run);
  else if (run.command == "viz") cmd_viz(run);
  else throw ConfigError("unknown command '" + run.command + "'");
  write_text(run.out_dir() / "manifest.json", manifest_json(run).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Entry point

inline int fail(std::ostream& err, const char* kind, int code, const std::string& message) {
  err << json{{"error", kind}, {"exit_code", code}, {"message", message}}.dump() << '\n';
  return code;
}

inline json parse_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + kv + "' is not key=value");
  const std::string key = kv.substr(0, eq), text = kv.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  return {{key, value}};
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Skeleton-based dystonia/chorea classifier", "skelnet"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  struct Common {
    std::string config, input, out, checkpoint;
    std::uint64_t seed = 0;
    std::vector<std::string> sets;
    bool verbose = false;
    std::size_t n = 0, k = 0, clip = 0, threads = 0;
    int fps = 0;
  } o;
  json overrides = json::object();

  struct Named {
    CLI::Option* opt;
    std::function<json()> value;
    std::string key;
  };
  std::vector<Named> flags;

  auto common = [&](CLI::App* sub, bool needs_input) {
    sub->add_option("--config", o.config, "flat JSON config file");
    flags.push_back({sub->add_option("--seed", o.seed, "master seed"), [&] { return json(o.seed); }, "seed"});
    flags.push_back({sub->add_option("--out", o.out, "output directory"), [&] { return json(o.out); }, "out"});
    if (needs_input)
      flags.push_back({sub->add_option("--input", o.input, "input file or directory"),
                       [&] { return json(o.input); }, "input"});
    sub->add_option("--set", o.sets, "config override key=value (repeatable)");
    sub->add_flag("--verbose", o.verbose, "log training progress to stderr");
  };

  auto* synth = app.add_subcommand("synth", "generate synthetic keypoint sequences");
  common(synth, false);
  flags.push_back({synth->add_option("--n", o.n, "sequences per class"), [&] { return json(o.n); },
                   "synth_n_per_class"});

  auto* prep = app.add_subcommand("preprocess", "turn keypoint sequences into a clip archive");
  common(prep, true);
  flags.push_back({prep->add_option("--fps", o.fps, "frame-rate target (0 keeps the source rate)"),
                   [&] { return json(o.fps); }, "target_fps"});

  auto* trn = app.add_subcommand("train", "train on a hold-out split and save a checkpoint");
  common(trn, true);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a clip archive");
  common(ev, true);
  flags.push_back({ev->add_option("--checkpoint", o.checkpoint, "checkpoint file"),
                   [&] { return json(o.checkpoint); }, "checkpoint"});

  auto* cv = app.add_subcommand("cv", "stratified k-fold cross-validation with bootstrap CIs");
  common(cv, true);
  flags.push_back({cv->add_option("--k", o.k, "folds"), [&] { return json(o.k); }, "k"});

  auto* grid = app.add_subcommand("grid", "grid search over alpha, gamma, learning rate and weight decay");
  common(grid, true);

  auto* sweep = app.add_subcommand("sweep", "frame-rate sweep from raw sequences to a metrics CSV");
  common(sweep, true);

  auto* vz = app.add_subcommand("viz", "render attention for one clip");
  common(vz, true);
  flags.push_back({vz->add_option("--checkpoint", o.checkpoint, "checkpoint file"),
                   [&] { return json(o.checkpoint); }, "checkpoint"});
  flags.push_back({vz->add_option("--clip", o.clip, "clip index"), [&] { return json(o.clip); }, "viz_clip"});
  flags.push_back({vz->add_option("--threads", o.threads, "render threads"),
                   [&] { return json(o.threads); }, "viz_threads"});

  std::string manifest_path;
  auto* replay = app.add_subcommand("replay", "re-run a command from its manifest");
  replay->add_option("manifest", manifest_path, "manifest.json of an earlier run")->required();

  auto* defaults = app.add_subcommand("defaults", "print the default config with key descriptions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return fail(err, "config", 2, e.what());
  }

  try {
    if (defaults->parsed()) {
      const RunConfig c;
      json docs = json::object();
      for (const auto& f : fields()) docs[f.key] = {{"default", f.get(c)}, {"doc", f.doc}};
      out << docs.dump(2) << '\n';
      return 0;
    }

    Run r;
    r.verbose = o.verbose;
    r.log = &err;
    if (replay->parsed()) {
      const auto m = read_json_file(manifest_path, true);
      if (!m.is_object() || !m.contains("command") || !m.contains("config"))
        throw ConfigError(manifest_path + " is not a run manifest");
      r.command = m.at("command").get<std::string>();
      apply_config(r.config, m.at("config"));
    } else {
      const CLI::App* sub = app.get_subcommands().front();
      r.command = sub->get_name();
      if (!o.config.empty()) apply_config(r.config, read_json_file(o.config, true));
      for (const auto& f : flags)
        if (f.opt->count() > 0) overrides[f.key] = f.value();
      for (const auto& s : o.sets) overrides.update(parse_override(s));
      apply_config(r.config, overrides);
    }
    dispatch(r);
    out << json{{"status", "ok"}, {"command", r.command}, {"out", r.config.out}}.dump() << '\n';
    return 0;
  } catch (const ConfigError& e) {
    return fail(err, "config", 2, e.what());
  } catch (const DataError& e) {
    return fail(err, "data", 3, e.what());
  } catch (const NumericError& e) {
    return fail(err, "numeric", 4, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(err, "data", 3, e.what());
  } catch (const std::exception& e) {
    return fail(err, "internal", 1, e.what());
  }
}

}  // namespace skelnet::cli
