#pragma once

// Command implementations behind the `chebcam` tool: synth, train, attribute,
// report. Kept in a header so tests can drive them in-process.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "chebcam/data.hpp"
#include "chebcam/errors.hpp"
#include "chebcam/nn.hpp"
#include "chebcam/saliency.hpp"
#include "chebcam/spectral.hpp"
#include "chebcam/train.hpp"

namespace chebcam::cli {

inline constexpr std::string_view kToolVersion = "0.1.0";
inline constexpr std::string_view kMetricsFormat = "chebcam-metrics/1";
inline constexpr std::string_view kFoldsFormat = "chebcam-folds/1";

enum ExitCode : int { kOk = 0, kValidationError = 1, kRuntimeError = 2 };

struct SynthOptions {
  SynthConfig config;
  fs::path out;
  bool force = false;
};

struct TrainOptions {
  fs::path data;
  fs::path out;
  std::uint64_t seed = 42;
  int runs = 10;
  int folds = 10;
  int steps = 500;
  int batch = 200;
  int eval_every = 10;
  double lr = 1e-3;
  int k_coeffs = 9;
  std::vector<int> channels{32, 32, 64, 64, 128};
  double dropout = 0.5;
  std::optional<std::vector<int>> dropout_layers;  // default: {1, 3, 4} within range
  double weight_decay = 5e-4;
  bool parallel = false;
  unsigned threads = 0;
};

struct AttributeOptions {
  fs::path results;
  std::optional<fs::path> data;  // default: dataset recorded by train
  std::optional<fs::path> out;   // default: results directory
  int top_k = 3;
  bool per_subject = false;
};

struct ReportOptions {
  fs::path results;
  std::optional<fs::path> saliency;  // directory holding saliency.csv; default: results
  std::optional<fs::path> out;       // optional copy of the report
};

inline std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

inline fs::path model_path(const fs::path& results, int run, int fold) {
  return results / "models" / ("run" + std::to_string(run) + "_fold" + std::to_string(fold) + ".json");
}

// ---------------------------------------------------------------------------
// synth

inline int cmd_synth(const SynthOptions& opt, std::ostream& out) {
  opt.config.validate();
  if (opt.out.empty()) throw InvalidInput("synth: --out is required");
  if (fs::exists(opt.out) && !fs::is_empty(opt.out)) {
    if (!opt.force) throw InvalidInput("synth: output directory " + opt.out.string() + " is not empty (use --force)");
    fs::remove_all(opt.out);
  }
  const Dataset ds = generate_synthetic(opt.config);
  save_dataset(ds, opt.out);
  out << "wrote " << ds.subjects.size() << " subjects, " << ds.num_nodes() << " nodes to " << opt.out.string() << "\n";
  out << "salient nodes:";
  for (int v : *ds.ground_truth_salient) out << ' ' << v;
  out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train

inline ModelConfig model_config_from(const TrainOptions& opt, const Dataset& ds) {
  ModelConfig mc;
  mc.channels = opt.channels;
  mc.num_coeffs = opt.k_coeffs;
  mc.dropout_rate = opt.dropout;
  mc.num_classes = ds.num_classes();
  mc.input_channels = static_cast<int>(ds.feature_dim());
  mc.dropout_layers.clear();
  if (opt.dropout_layers) {
    mc.dropout_layers.insert(opt.dropout_layers->begin(), opt.dropout_layers->end());
  } else {
    for (int l : {1, 3, 4})
      if (l < static_cast<int>(opt.channels.size())) mc.dropout_layers.insert(l);
  }
  mc.validate();
  return mc;
}

inline TrainConfig train_config_from(const TrainOptions& opt) {
  TrainConfig tc;
  tc.learning_rate = opt.lr;
  tc.weight_decay = opt.weight_decay;
  tc.batch_size = opt.batch;
  tc.total_steps = opt.steps;
  tc.eval_every = opt.eval_every;
  tc.seed = opt.seed;
  tc.validate();
  return tc;
}

inline json model_config_json(const ModelConfig& mc) {
  return {{"channels", mc.channels},
          {"num_coeffs", mc.num_coeffs},
          {"dropout_layers", std::vector<int>(mc.dropout_layers.begin(), mc.dropout_layers.end())},
          {"dropout_rate", mc.dropout_rate},
          {"num_classes", mc.num_classes},
          {"input_channels", mc.input_channels}};
}

inline json train_config_json(const TrainConfig& tc) {
  return {{"learning_rate", tc.learning_rate}, {"beta1", tc.beta1},
          {"beta2", tc.beta2},                 {"epsilon", tc.epsilon},
          {"weight_decay", tc.weight_decay},   {"batch_size", tc.batch_size},
          {"total_steps", tc.total_steps},     {"eval_every", tc.eval_every},
          {"lr_decay_factor", tc.lr_decay_factor}, {"seed", tc.seed}};
}

/// Table-2-shaped metrics: per-run fold accuracies, mean/std, grand mean.
inline json metrics_json(const CvResult& cv, int n_folds) {
  json runs = json::array();
  for (const auto& run : cv.runs) {
    json folds = json::array();
    std::vector<double> accs;
    for (std::size_t f = 0; f < run.folds.size(); ++f) {
      const auto& rep = run.folds[f].report;
      accs.push_back(rep.test_accuracy);
      json evals = json::array();
      for (const auto& e : rep.evaluations)
        evals.push_back({{"step", e.step}, {"val_accuracy", e.val_accuracy}, {"learning_rate", e.learning_rate}});
      json events = json::array();
      for (const auto& e : rep.lr_events) events.push_back({{"step", e.step}, {"old_lr", e.old_lr}, {"new_lr", e.new_lr}});
      folds.push_back({{"fold", f},
                       {"test_accuracy", rep.test_accuracy},
                       {"final_lr", rep.final_lr},
                       {"final_loss", rep.final_loss},
                       {"lr_events", std::move(events)},
                       {"validation", std::move(evals)}});
    }
    runs.push_back({{"run", run.run},
                    {"seed", run.seed},
                    {"fold_accuracies", accs},
                    {"mean", run.mean_accuracy},
                    {"std", run.std_accuracy},
                    {"folds", std::move(folds)}});
  }
  return {{"format_version", kMetricsFormat}, {"n_runs", cv.runs.size()}, {"n_folds", n_folds},
          {"runs", std::move(runs)},          {"grand_mean", cv.grand_mean}, {"grand_std", cv.grand_std}};
}

inline json folds_json(const CvResult& cv, const Dataset& ds, int n_folds) {
  std::vector<std::string> ids;
  for (const auto& s : ds.subjects) ids.push_back(s.id);
  json runs = json::array();
  for (const auto& run : cv.runs) runs.push_back({{"run", run.run}, {"seed", run.seed}, {"fold_of", run.fold_of}});
  return {{"format_version", kFoldsFormat}, {"n_folds", n_folds}, {"subject_ids", ids}, {"runs", std::move(runs)}};
}

inline int cmd_train(const TrainOptions& opt, std::ostream& out) {
  if (opt.data.empty()) throw InvalidInput("train: --data is required");
  if (opt.out.empty()) throw InvalidInput("train: --out is required");
  const std::string started = utc_timestamp();
  const Dataset ds = load_dataset(opt.data);
  const ModelConfig mc = model_config_from(opt, ds);
  const TrainConfig tc = train_config_from(opt);
  const ScaledLaplacian ltilde = make_scaled_laplacian(ds.graph);

  const CvResult cv = run_cross_validation(ds, ltilde, mc, tc, {opt.runs, opt.folds, opt.parallel, opt.threads});

  fs::create_directories(opt.out / "models");
  for (const auto& run : cv.runs)
    for (std::size_t f = 0; f < run.folds.size(); ++f)
      save_model(run.folds[f].model, model_path(opt.out, run.run, static_cast<int>(f)));
  write_text_file(opt.out / "folds.json", folds_json(cv, ds, opt.folds).dump(1) + "\n");
  write_text_file(opt.out / "metrics.json", metrics_json(cv, opt.folds).dump(2) + "\n");

  json manifest = {{"tool", "chebcam"},
                   {"tool_version", kToolVersion},
                   {"base_seed", opt.seed},
                   {"n_runs", opt.runs},
                   {"n_folds", opt.folds},
                   {"parallel", opt.parallel},
                   {"dataset", {{"path", fs::absolute(opt.data).lexically_normal().string()},
                                {"checksum_fnv1a64", hex64(dataset_checksum(opt.data))}}},
                   {"model_config", model_config_json(mc)},
                   {"train_config", train_config_json(tc)},
                   {"laplacian", {{"lambda_max", ltilde.lambda_max}, {"converged", ltilde.converged}}},
                   {"started_utc", started},
                   {"finished_utc", utc_timestamp()}};
  write_text_file(opt.out / "run_manifest.json", manifest.dump(2) + "\n");

  for (const auto& run : cv.runs)
    out << "run " << run.run + 1 << ": accuracy " << fixed(100.0 * run.mean_accuracy, 2) << "% (std "
        << fixed(100.0 * run.std_accuracy, 2) << ")\n";
  out << "grand mean accuracy " << fixed(100.0 * cv.grand_mean, 2) << "% over " << cv.runs.size() * opt.folds
      << " folds\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// attribute

inline json read_json_file(const fs::path& path, const std::string& what) {
  try {
    return json::parse(read_text_file(path, what));
  } catch (const json::exception& e) {
    throw DataError(DataError::Kind::Parse, path.string() + ": " + e.what());
  }
}

/// Loads fold models and splits written by `train`.
inline std::vector<RunArtifacts> load_run_artifacts(const fs::path& results, const Dataset& ds) {
  const json folds = read_json_file(results / "folds.json", "fold assignments");
  try {
    const int n_folds = folds.at("n_folds").get<int>();
    const auto ids = folds.at("subject_ids").get<std::vector<std::string>>();
    if (ids.size() != ds.subjects.size())
      throw InvalidInput("attribute: results were produced on a dataset with " + std::to_string(ids.size()) +
                         " subjects, this one has " + std::to_string(ds.subjects.size()));
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] != ds.subjects[i].id)
        throw InvalidInput("attribute: subject order differs from the training dataset at " + ids[i]);
    std::vector<RunArtifacts> runs;
    for (const auto& run : folds.at("runs")) {
      const int r = run.at("run").get<int>();
      const auto fold_of = run.at("fold_of").get<std::vector<int>>();
      if (fold_of.size() != ds.subjects.size()) throw InvalidInput("attribute: fold assignment size mismatch");
      RunArtifacts a;
      a.splits = splits_from_assignment(fold_of, n_folds);
      for (int f = 0; f < n_folds; ++f) {
        const fs::path p = model_path(results, r, f);
        if (!fs::is_regular_file(p))
          throw InvalidState("attribute: missing model for run " + std::to_string(r) + " fold " + std::to_string(f) +
                             " (" + p.string() + ")");
        a.fold_models.push_back(load_model(p));
      }
      runs.push_back(std::move(a));
    }
    return runs;
  } catch (const json::exception& e) {
    throw DataError(DataError::Kind::Parse, (results / "folds.json").string() + ": " + e.what());
  }
}

inline std::string saliency_csv(const PopulationSaliency& sal) {
  std::string s = "node_index";
  for (Index c = 0; c < sal.mean_activation.rows(); ++c)
    s += ",mean_activation_class" + std::to_string(c) + "_scaled";
  s += ",topk_count\n";
  for (std::size_t v = 0; v < sal.topk_counts.size(); ++v) {
    s += std::to_string(v);
    for (Index c = 0; c < sal.mean_activation.rows(); ++c)
      s += "," + format_double(sal.mean_activation(c, static_cast<Index>(v)));
    s += "," + std::to_string(sal.topk_counts[v]) + "\n";
  }
  return s;
}

/// Bar per node for top-k counts, one marker series per class for scaled mean activation.
inline std::string saliency_svg(const PopulationSaliency& sal, const std::vector<std::string>& class_names) {
  const auto d = static_cast<int>(sal.topk_counts.size());
  const double left = 60, top = 40, plot_h = 300, slot = 24, bottom = 60;
  const double width = left + slot * d + 140;
  const double height = top + plot_h + bottom;
  long max_count = 1;
  for (long c : sal.topk_counts) max_count = std::max(max_count, c);
  static const char* palette[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"};

  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed(width, 0) << "\" height=\"" << fixed(height, 0)
    << "\" viewBox=\"0 0 " << fixed(width, 0) << ' ' << fixed(height, 0) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<title>Population-level saliency (top-" << sal.k << " counts over " << sal.n_subjects << " subjects x "
    << sal.n_runs << " runs)</title>\n";
  s << "<rect x=\"0\" y=\"0\" width=\"" << fixed(width, 0) << "\" height=\"" << fixed(height, 0) << "\" fill=\"white\"/>\n";
  s << "<line x1=\"" << fixed(left, 1) << "\" y1=\"" << fixed(top + plot_h, 1) << "\" x2=\"" << fixed(left + slot * d, 1)
    << "\" y2=\"" << fixed(top + plot_h, 1) << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << fixed(left, 1) << "\" y1=\"" << fixed(top, 1) << "\" x2=\"" << fixed(left, 1) << "\" y2=\""
    << fixed(top + plot_h, 1) << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << fixed(left - 8, 1) << "\" y=\"" << fixed(top + 4, 1) << "\" text-anchor=\"end\">" << max_count
    << "</text>\n";
  s << "<text x=\"" << fixed(left - 8, 1) << "\" y=\"" << fixed(top + plot_h + 4, 1) << "\" text-anchor=\"end\">0</text>\n";
  s << "<text x=\"" << fixed(left + slot * d / 2.0, 1) << "\" y=\"" << fixed(height - 15, 1)
    << "\" text-anchor=\"middle\">node index</text>\n";
  s << "<g class=\"bars\">\n";
  for (int v = 0; v < d; ++v) {
    const double h = plot_h * static_cast<double>(sal.topk_counts[static_cast<std::size_t>(v)]) / static_cast<double>(max_count);
    const double x = left + slot * v + 3;
    s << "<rect class=\"bar\" data-node=\"" << v << "\" x=\"" << fixed(x, 1) << "\" y=\"" << fixed(top + plot_h - h, 2)
      << "\" width=\"" << fixed(slot - 6, 1) << "\" height=\"" << fixed(h, 2) << "\" fill=\"#bbbbbb\"><title>node " << v
      << ": " << sal.topk_counts[static_cast<std::size_t>(v)] << "</title></rect>\n";
    s << "<text x=\"" << fixed(left + slot * v + slot / 2, 1) << "\" y=\"" << fixed(top + plot_h + 14, 1)
      << "\" text-anchor=\"middle\">" << v << "</text>\n";
  }
  s << "</g>\n";
  for (Index c = 0; c < sal.mean_activation.rows(); ++c) {
    const char* colour = palette[c % 5];
    s << "<g class=\"markers\" data-class=\"" << c << "\" fill=\"" << colour << "\">\n";
    for (int v = 0; v < d; ++v) {
      const double y = top + plot_h * (1.0 - sal.mean_activation(c, v));
      s << "<circle cx=\"" << fixed(left + slot * v + slot / 2, 1) << "\" cy=\"" << fixed(y, 2) << "\" r=\"3.5\"/>\n";
    }
    s << "</g>\n";
    const double ly = top + 16.0 * static_cast<double>(c);
    std::string name = c < static_cast<Index>(class_names.size()) ? class_names[static_cast<std::size_t>(c)]
                                                                    : "class" + std::to_string(c);
    for (char& ch : name)
      if (ch == '<' || ch == '>' || ch == '&' || ch == '"') ch = '_';
    s << "<circle cx=\"" << fixed(left + slot * d + 20, 1) << "\" cy=\"" << fixed(ly, 1) << "\" r=\"3.5\" fill=\""
      << colour << "\"/>\n";
    s << "<text x=\"" << fixed(left + slot * d + 30, 1) << "\" y=\"" << fixed(ly + 4, 1) << "\">" << name
      << " (scaled)</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

inline std::string per_subject_csv(const PopulationSaliency& sal, const Dataset& ds) {
  std::string s = "run,subject_id,label,predicted,class_index";
  for (Index v = 0; v < ds.num_nodes(); ++v) s += ",node_" + std::to_string(v);
  s += "\n";
  for (const auto& rec : sal.per_subject) {
    const auto& subj = ds.subjects[static_cast<std::size_t>(rec.subject)];
    for (Index c = 0; c < rec.scores.rows(); ++c) {
      s += std::to_string(rec.run) + "," + subj.id + "," + std::to_string(subj.label) + "," +
           std::to_string(rec.predicted) + "," + std::to_string(c);
      for (Index v = 0; v < rec.scores.cols(); ++v) s += "," + format_double(rec.scores(c, v));
      s += "\n";
    }
  }
  return s;
}

inline int cmd_attribute(const AttributeOptions& opt, std::ostream& out) {
  if (opt.results.empty()) throw InvalidInput("attribute: --results is required");
  const json manifest = read_json_file(opt.results / "run_manifest.json", "run manifest");
  fs::path data_dir;
  std::string recorded_checksum;
  try {
    data_dir = opt.data ? *opt.data : fs::path(manifest.at("dataset").at("path").get<std::string>());
    recorded_checksum = manifest.at("dataset").at("checksum_fnv1a64").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError(DataError::Kind::Parse, (opt.results / "run_manifest.json").string() + ": " + e.what());
  }
  const Dataset ds = load_dataset(data_dir);
  if (hex64(dataset_checksum(data_dir)) != recorded_checksum)
    throw InvalidInput("attribute: dataset " + data_dir.string() + " does not match the one used for training");
  const ScaledLaplacian ltilde = make_scaled_laplacian(ds.graph);
  const auto runs = load_run_artifacts(opt.results, ds);
  const PopulationSaliency sal = population_saliency(runs, ds, ltilde, opt.top_k, opt.per_subject);

  const fs::path out_dir = opt.out ? *opt.out : opt.results;
  fs::create_directories(out_dir);
  write_text_file(out_dir / "saliency.csv", saliency_csv(sal));
  write_text_file(out_dir / "saliency.svg", saliency_svg(sal, ds.class_names));
  if (opt.per_subject) write_text_file(out_dir / "cams.csv", per_subject_csv(sal, ds));

  out << "top-" << sal.k << " nodes over " << sal.n_subjects << " subjects x " << sal.n_runs << " runs:";
  const auto ranked = rank_nodes(sal.topk_counts);
  for (std::size_t i = 0; i < std::min<std::size_t>(ranked.size(), 10); ++i)
    out << ' ' << ranked[i] << '(' << sal.topk_counts[static_cast<std::size_t>(ranked[i])] << ')';
  out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// report

struct SaliencyRow {
  int node = 0;
  long topk_count = 0;
};

inline std::vector<SaliencyRow> read_saliency_csv(const fs::path& path) {
  const std::string text = read_text_file(path, "saliency table");
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("node_index,", 0) != 0)
    throw DataError(DataError::Kind::Parse, path.string() + ": missing header");
  std::vector<SaliencyRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto first = line.find(',');
    const auto last = line.rfind(',');
    try {
      rows.push_back({std::stoi(line.substr(0, first)), std::stol(line.substr(last + 1))});
    } catch (const std::exception&) {
      throw DataError(DataError::Kind::Parse, path.string() + " line " + std::to_string(line_no) + ": malformed row");
    }
  }
  return rows;
}

inline std::string render_report(const json& metrics, const std::vector<SaliencyRow>& saliency) {
  std::ostringstream s;
  s << "Test accuracy per run (%)\n";
  s << "Run     Acc      Std\n";
  std::vector<double> all;
  for (const auto& run : metrics.at("runs")) {
    char line[96];
    std::snprintf(line, sizeof(line), "%-6d %6.2f   %6.2f\n", run.at("run").get<int>() + 1,
                  100.0 * run.at("mean").get<double>(), 100.0 * run.at("std").get<double>());
    s << line;
  }
  char avg[96];
  std::snprintf(avg, sizeof(avg), "%-6s %6.2f   %6.2f\n", "Avr", 100.0 * metrics.at("grand_mean").get<double>(),
                100.0 * metrics.at("grand_std").get<double>());
  s << avg;

  std::vector<long> counts;
  std::vector<int> nodes;
  for (const auto& row : saliency) {
    nodes.push_back(row.node);
    counts.push_back(row.topk_count);
  }
  const auto order = rank_nodes(counts);
  s << "\nMost important nodes, in descending order\n";
  s << "Rank  Node  Top-k count\n";
  for (std::size_t i = 0; i < order.size(); ++i) {
    char line[96];
    std::snprintf(line, sizeof(line), "%-5zu %-5d %ld\n", i + 1, nodes[static_cast<std::size_t>(order[i])],
                  counts[static_cast<std::size_t>(order[i])]);
    s << line;
  }
  return s.str();
}

inline int cmd_report(const ReportOptions& opt, std::ostream& out) {
  if (opt.results.empty()) throw InvalidInput("report: --results is required");
  const json metrics = read_json_file(opt.results / "metrics.json", "metrics");
  const auto saliency = read_saliency_csv((opt.saliency ? *opt.saliency : opt.results) / "saliency.csv");
  std::string text;
  try {
    text = render_report(metrics, saliency);
  } catch (const json::exception& e) {
    throw DataError(DataError::Kind::Parse, (opt.results / "metrics.json").string() + ": " + e.what());
  }
  out << text;
  if (opt.out) write_text_file(*opt.out, text);
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

/// Parses argv and dispatches; returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Chebyshev graph convolutional networks with class activation mapping"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  SynthOptions synth;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a planted-saliency synthetic dataset");
  synth_cmd->add_option("--subjects", synth.config.n_subjects, "Number of subjects")->capture_default_str();
  synth_cmd->add_option("--nodes", synth.config.d_nodes, "Number of graph nodes")->capture_default_str();
  synth_cmd->add_option("--salient", synth.config.n_salient, "Number of planted salient nodes")->capture_default_str();
  synth_cmd->add_option("--effect", synth.config.effect_size, "Class effect size on salient edges")->capture_default_str();
  synth_cmd->add_option("--noise", synth.config.noise_sd, "Per-edge noise standard deviation")->capture_default_str();
  synth.config.seed = 42;
  synth_cmd->add_option("--seed", synth.config.seed, "Random seed")->capture_default_str();
  synth_cmd->add_option("--out", synth_out, "Output dataset directory")->required();
  synth_cmd->add_flag("--force", synth.force, "Overwrite a non-empty output directory");

  TrainOptions train;
  std::string train_data, train_out;
  std::vector<int> dropout_layers;
  auto* train_cmd = app.add_subcommand("train", "Repeated stratified cross-validation");
  train_cmd->add_option("--data", train_data, "Dataset directory")->required();
  train_cmd->add_option("--out", train_out, "Results directory")->required();
  train_cmd->add_option("--seed", train.seed, "Base seed")->capture_default_str();
  train_cmd->add_option("--runs", train.runs, "Repetitions with different seeds")->capture_default_str();
  train_cmd->add_option("--folds", train.folds, "Cross-validation folds")->capture_default_str();
  train_cmd->add_option("--steps", train.steps, "Optimizer steps per fold")->capture_default_str();
  train_cmd->add_option("--batch", train.batch, "Mini-batch size (even)")->capture_default_str();
  train_cmd->add_option("--eval-every", train.eval_every, "Validation interval in steps")->capture_default_str();
  train_cmd->add_option("--lr", train.lr, "Initial learning rate")->capture_default_str();
  train_cmd->add_option("--k-coeffs", train.k_coeffs, "Chebyshev coefficients per filter")->capture_default_str();
  train_cmd->add_option("--channels", train.channels, "Conv layer widths, comma separated")
      ->delimiter(',')
      ->capture_default_str();
  train_cmd->add_option("--dropout", train.dropout, "Dropout rate")->capture_default_str();
  train_cmd->add_option("--dropout-layers", dropout_layers, "0-based conv layers with dropout (default 1,3,4)")
      ->delimiter(',');
  train_cmd->add_option("--weight-decay", train.weight_decay, "L2 decay")->capture_default_str();
  train_cmd->add_flag("--parallel", train.parallel, "Train folds and runs concurrently");
  train_cmd->add_option("--threads", train.threads, "Worker threads with --parallel (0: all cores)");

  AttributeOptions attr;
  std::string attr_results, attr_data, attr_out;
  auto* attr_cmd = app.add_subcommand("attribute", "Population-level saliency from trained fold models");
  attr_cmd->add_option("--results", attr_results, "Results directory written by train")->required();
  attr_cmd->add_option("--data", attr_data, "Dataset directory (default: the one used for training)");
  attr_cmd->add_option("--out", attr_out, "Output directory (default: results directory)");
  attr_cmd->add_option("--top-k", attr.top_k, "Nodes counted per subject")->capture_default_str();
  attr_cmd->add_flag("--per-subject", attr.per_subject, "Also write per-subject class activation maps");

  ReportOptions report;
  std::string report_results, report_saliency, report_out;
  auto* report_cmd = app.add_subcommand("report", "Accuracy table and node ranking");
  report_cmd->add_option("--results", report_results, "Results directory")->required();
  report_cmd->add_option("--saliency", report_saliency, "Directory with saliency.csv (default: results)");
  report_cmd->add_option("--out", report_out, "Also write the report to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kValidationError;
  }

  try {
    if (*synth_cmd) {
      synth.out = synth_out;
      return cmd_synth(synth, out);
    }
    if (*train_cmd) {
      train.data = train_data;
      train.out = train_out;
      if (train_cmd->count("--dropout-layers")) train.dropout_layers = dropout_layers;
      return cmd_train(train, out);
    }
    if (*attr_cmd) {
      attr.results = attr_results;
      if (!attr_data.empty()) attr.data = fs::path(attr_data);
      if (!attr_out.empty()) attr.out = fs::path(attr_out);
      return cmd_attribute(attr, out);
    }
    if (*report_cmd) {
      report.results = report_results;
      if (!report_saliency.empty()) report.saliency = fs::path(report_saliency);
      if (!report_out.empty()) report.out = fs::path(report_out);
      return cmd_report(report, out);
    }
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << "\n";
    return kValidationError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kValidationError;
}

}  // namespace chebcam::cli
