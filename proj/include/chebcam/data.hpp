#pragma once

// Dataset schema and validation, on-disk formats, model serialization, and the
// planted-saliency synthetic connectome generator.
//
// Dataset directory:
//   manifest.json      {format_version, class_names, d_nodes, feature_dim,
//                       subjects: [{id, label, features_file}], ground_truth_salient?}
//   graph.csv          d x d adjacency, comma separated, no header
//   features/<id>.csv  d_x x d_y node features

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "chebcam/errors.hpp"
#include "chebcam/nn.hpp"
#include "chebcam/random.hpp"
#include "chebcam/spectral.hpp"

namespace chebcam {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr std::string_view kDatasetFormat = "chebcam-dataset/1";
inline constexpr std::string_view kModelFormat = "chebcam-model/1";

struct Subject {
  std::string id;
  int label = 0;
  MatrixXd features;  // d_x x d_y
};

struct Dataset {
  Graph graph;
  std::vector<Subject> subjects;
  std::vector<std::string> class_names;
  std::optional<std::vector<int>> ground_truth_salient;

  Index num_nodes() const { return graph.num_nodes(); }
  Index feature_dim() const { return subjects.empty() ? 0 : subjects.front().features.cols(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(subjects.size());
    for (const auto& s : subjects) out.push_back(s.label);
    return out;
  }
};

inline bool is_safe_id(std::string_view id) {
  if (id.empty() || id == "." || id == "..") return false;
  for (char c : id)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
  return true;
}

/// Dimensions, finiteness, labels, and at least two subjects per class.
inline void validate_dataset(const Dataset& ds) {
  using K = DataError::Kind;
  if (ds.class_names.size() < 2) throw DataError(K::Invariant, "dataset: need at least 2 classes");
  if (ds.subjects.empty()) throw DataError(K::Invariant, "dataset: no subjects");
  const Index d = ds.num_nodes();
  const Index dy = ds.feature_dim();
  if (dy < 1) throw DataError(K::DimensionMismatch, "dataset: feature_dim must be positive");
  std::vector<int> per_class(ds.class_names.size(), 0);
  std::vector<std::string> ids;
  for (const auto& s : ds.subjects) {
    if (!is_safe_id(s.id)) throw DataError(K::Invariant, "dataset: invalid subject id '" + s.id + "'");
    if (s.label < 0 || s.label >= ds.num_classes())
      throw DataError(K::UnknownLabel, "subject " + s.id + ": unknown label " + std::to_string(s.label));
    if (s.features.rows() != d || s.features.cols() != dy)
      throw DataError(K::DimensionMismatch, "subject " + s.id + ": features are " + std::to_string(s.features.rows()) +
                                                "x" + std::to_string(s.features.cols()) + ", expected " +
                                                std::to_string(d) + "x" + std::to_string(dy));
    if (!s.features.allFinite()) throw DataError(K::NonFinite, "subject " + s.id + ": non-finite feature value");
    ++per_class[static_cast<std::size_t>(s.label)];
    ids.push_back(s.id);
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw DataError(K::Invariant, "dataset: duplicate subject id '" + *std::adjacent_find(ids.begin(), ids.end()) + "'");
  for (std::size_t c = 0; c < per_class.size(); ++c)
    if (per_class[c] < 2)
      throw DataError(K::Invariant, "dataset: class '" + ds.class_names[c] + "' has fewer than 2 subjects");
  if (ds.ground_truth_salient)
    for (int v : *ds.ground_truth_salient)
      if (v < 0 || v >= d) throw DataError(K::Invariant, "dataset: ground-truth node " + std::to_string(v) + " out of range");
}

// ---------------------------------------------------------------------------
// CSV

/// Shortest representation that parses back to the same double.
inline std::string format_double(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

inline std::string matrix_to_csv(const MatrixXd& m) {
  std::string out;
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (j) out += ',';
      out += format_double(m(i, j));
    }
    out += '\n';
  }
  return out;
}

inline std::string read_text_file(const fs::path& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::MissingFile, what + ": cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

/// Parses a numeric CSV; `what` names the source in error messages.
inline MatrixXd parse_csv_matrix(std::string_view text, const std::string& what) {
  using K = DataError::Kind;
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto eol = text.find('\n');
    std::string_view line = text.substr(0, eol);
    text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    std::vector<double> row;
    std::size_t col = 0;
    while (true) {
      const auto comma = line.find(',');
      std::string_view cell = line.substr(0, comma);
      while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
      while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t')) cell.remove_suffix(1);
      ++col;
      if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
      double value = 0.0;
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), value);
      const std::string loc = what + " line " + std::to_string(line_no) + " column " + std::to_string(col);
      if (cell.empty() || res.ec != std::errc{} || res.ptr != cell.data() + cell.size())
        throw DataError(K::Parse, loc + ": not a number '" + std::string(cell) + "'");
      if (!std::isfinite(value)) throw DataError(K::NonFinite, loc + ": non-finite value");
      row.push_back(value);
      if (comma == std::string_view::npos) break;
      line = line.substr(comma + 1);
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw DataError(K::DimensionMismatch, what + " line " + std::to_string(line_no) + ": expected " +
                                                std::to_string(rows.front().size()) + " columns, got " +
                                                std::to_string(row.size()));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError(K::Parse, what + ": empty matrix");
  MatrixXd m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return m;
}

// ---------------------------------------------------------------------------
// Dataset I/O

inline void save_dataset(const Dataset& ds, const fs::path& dir) {
  validate_dataset(ds);
  fs::create_directories(dir / "features");
  json manifest;
  manifest["format_version"] = kDatasetFormat;
  manifest["class_names"] = ds.class_names;
  manifest["d_nodes"] = ds.num_nodes();
  manifest["feature_dim"] = ds.feature_dim();
  json subjects = json::array();
  for (const auto& s : ds.subjects) {
    const std::string file = "features/" + s.id + ".csv";
    subjects.push_back({{"id", s.id}, {"label", s.label}, {"features_file", file}});
    write_text_file(dir / file, matrix_to_csv(s.features));
  }
  manifest["subjects"] = std::move(subjects);
  if (ds.ground_truth_salient) manifest["ground_truth_salient"] = *ds.ground_truth_salient;
  write_text_file(dir / "graph.csv", matrix_to_csv(ds.graph.weights()));
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Dataset load_dataset(const fs::path& dir) {
  using K = DataError::Kind;
  const fs::path manifest_path = dir / "manifest.json";
  json manifest;
  try {
    manifest = json::parse(read_text_file(manifest_path, "manifest"));
  } catch (const json::exception& e) {
    throw DataError(K::Parse, manifest_path.string() + ": " + e.what());
  }
  try {
    if (manifest.at("format_version").get<std::string>() != kDatasetFormat)
      throw DataError(K::Version, manifest_path.string() + ": unsupported format_version " +
                                      manifest.at("format_version").dump());
    auto class_names = manifest.at("class_names").get<std::vector<std::string>>();
    const auto d = manifest.at("d_nodes").get<Index>();
    const auto dy = manifest.at("feature_dim").get<Index>();

    MatrixXd w = parse_csv_matrix(read_text_file(dir / "graph.csv", "graph"), "graph.csv");
    if (w.rows() != d || w.cols() != d)
      throw DataError(K::DimensionMismatch, "graph.csv: expected " + std::to_string(d) + "x" + std::to_string(d) +
                                                ", got " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
    for (Index i = 0; i < d; ++i)
      for (Index j = i + 1; j < d; ++j)
        if (std::abs(w(i, j) - w(j, i)) >= 1e-9)
          throw DataError(K::Invariant, "graph.csv: asymmetric entry (" + std::to_string(i) + "," + std::to_string(j) + ")");
    w = (0.5 * (w + w.transpose())).eval();
    std::optional<Graph> graph;
    try {
      graph.emplace(std::move(w));
    } catch (const InvalidInput& e) {
      throw DataError(K::Invariant, std::string("graph.csv: ") + e.what());
    }

    Dataset ds{*graph, {}, std::move(class_names), std::nullopt};
    for (const auto& entry : manifest.at("subjects")) {
      Subject s;
      s.id = entry.at("id").get<std::string>();
      const auto& label = entry.at("label");
      if (label.is_number_integer()) {
        s.label = label.get<int>();
      } else if (label.is_string()) {
        const auto it = std::find(ds.class_names.begin(), ds.class_names.end(), label.get<std::string>());
        s.label = it == ds.class_names.end() ? -1 : static_cast<int>(it - ds.class_names.begin());
      } else {
        s.label = -1;
      }
      if (s.label < 0 || s.label >= ds.num_classes())
        throw DataError(K::UnknownLabel, "subject " + s.id + ": unknown label " + label.dump());
      const auto file = entry.at("features_file").get<std::string>();
      const fs::path path = dir / file;
      if (!fs::is_regular_file(path))
        throw DataError(K::MissingFile, "subject " + s.id + ": missing feature file " + path.string());
      s.features = parse_csv_matrix(read_text_file(path, "subject " + s.id), "subject " + s.id + " (" + file + ")");
      if (s.features.rows() != d || s.features.cols() != dy)
        throw DataError(K::DimensionMismatch, "subject " + s.id + ": features are " +
                                                  std::to_string(s.features.rows()) + "x" +
                                                  std::to_string(s.features.cols()) + ", expected " +
                                                  std::to_string(d) + "x" + std::to_string(dy));
      ds.subjects.push_back(std::move(s));
    }
    if (manifest.contains("ground_truth_salient"))
      ds.ground_truth_salient = manifest.at("ground_truth_salient").get<std::vector<int>>();
    validate_dataset(ds);
    return ds;
  } catch (const json::exception& e) {
    throw DataError(K::Parse, manifest_path.string() + ": " + e.what());
  }
}

/// FNV-1a over the manifest, graph and feature files in manifest order.
inline std::uint64_t dataset_checksum(const fs::path& dir) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](std::string_view bytes) {
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  const std::string manifest_text = read_text_file(dir / "manifest.json", "manifest");
  feed(manifest_text);
  feed(read_text_file(dir / "graph.csv", "graph"));
  const json manifest = json::parse(manifest_text);
  for (const auto& entry : manifest.at("subjects"))
    feed(read_text_file(dir / entry.at("features_file").get<std::string>(), "features"));
  return h;
}

// ---------------------------------------------------------------------------
// Model I/O

namespace detail {

inline json tensor_to_json(const std::string& name, std::vector<Index> shape, std::vector<double> data) {
  return {{"name", name}, {"shape", std::move(shape)}, {"data", std::move(data)}};
}

}  // namespace detail

inline json model_to_json(const Model& model) {
  model.check_consistent();
  const auto& cfg = model.config;
  json j;
  j["format_version"] = kModelFormat;
  j["config"] = {{"channels", cfg.channels},
                 {"num_coeffs", cfg.num_coeffs},
                 {"dropout_layers", std::vector<int>(cfg.dropout_layers.begin(), cfg.dropout_layers.end())},
                 {"dropout_rate", cfg.dropout_rate},
                 {"num_classes", cfg.num_classes},
                 {"input_channels", cfg.input_channels}};
  json params = json::array();
  for (std::size_t l = 0; l < model.params.conv.size(); ++l) {
    const auto& layer = model.params.conv[l];
    std::vector<double> coeffs;
    coeffs.reserve(static_cast<std::size_t>(layer.coeffs.size()));
    for (Index i = 0; i < layer.in_channels(); ++i)
      for (Index o = 0; o < layer.out_channels(); ++o)
        for (Index k = 0; k < layer.num_coeffs; ++k) coeffs.push_back(layer.theta(i, o, k));
    const std::string prefix = "conv" + std::to_string(l);
    params.push_back(detail::tensor_to_json(prefix + ".coeffs",
                                            {layer.in_channels(), layer.out_channels(), layer.num_coeffs},
                                            std::move(coeffs)));
    params.push_back(detail::tensor_to_json(prefix + ".bias", {layer.bias.size()},
                                            std::vector<double>(layer.bias.begin(), layer.bias.end())));
  }
  const auto& w = model.params.dense.weights;
  std::vector<double> weights;
  for (Index i = 0; i < w.rows(); ++i)
    for (Index c = 0; c < w.cols(); ++c) weights.push_back(w(i, c));
  params.push_back(detail::tensor_to_json("dense.weights", {w.rows(), w.cols()}, std::move(weights)));
  params.push_back(detail::tensor_to_json("dense.bias", {model.params.dense.bias.size()},
                                          std::vector<double>(model.params.dense.bias.begin(),
                                                              model.params.dense.bias.end())));
  j["parameters"] = std::move(params);
  return j;
}

inline Model model_from_json(const json& j, const std::string& where = "model") {
  using K = DataError::Kind;
  try {
    if (j.at("format_version").get<std::string>() != kModelFormat)
      throw DataError(K::Version, where + ": unsupported format_version " + j.at("format_version").dump());
    const auto& c = j.at("config");
    ModelConfig cfg;
    cfg.channels = c.at("channels").get<std::vector<int>>();
    cfg.num_coeffs = c.at("num_coeffs").get<int>();
    const auto drop = c.at("dropout_layers").get<std::vector<int>>();
    cfg.dropout_layers = std::set<int>(drop.begin(), drop.end());
    cfg.dropout_rate = c.at("dropout_rate").get<double>();
    cfg.num_classes = c.at("num_classes").get<int>();
    cfg.input_channels = c.at("input_channels").get<int>();
    cfg.validate();

    // Shapes come from the config; every stored tensor must match them.
    Model model = init_model(cfg, 0);
    std::size_t count = 0;
    const auto& tensors = j.at("parameters");
    auto find = [&](const std::string& name) -> const json& {
      for (const auto& t : tensors)
        if (t.at("name").get<std::string>() == name) return t;
      throw DataError(K::Parse, where + ": missing tensor " + name);
    };
    auto load = [&](const std::string& name, std::vector<Index> expected_shape) {
      const json& t = find(name);
      if (t.at("shape").get<std::vector<Index>>() != expected_shape)
        throw DataError(K::DimensionMismatch, where + ": tensor " + name + " has shape " + t.at("shape").dump());
      auto data = t.at("data").get<std::vector<double>>();
      Index expected = 1;
      for (Index s : expected_shape) expected *= s;
      if (static_cast<Index>(data.size()) != expected)
        throw DataError(K::DimensionMismatch, where + ": tensor " + name + " has " + std::to_string(data.size()) +
                                                  " values, shape needs " + std::to_string(expected));
      for (double v : data)
        if (!std::isfinite(v)) throw DataError(K::NonFinite, where + ": tensor " + name + " has a non-finite value");
      ++count;
      return data;
    };
    for (std::size_t l = 0; l < model.params.conv.size(); ++l) {
      auto& layer = model.params.conv[l];
      const std::string prefix = "conv" + std::to_string(l);
      const auto coeffs = load(prefix + ".coeffs", {layer.in_channels(), layer.out_channels(), layer.num_coeffs});
      std::size_t n = 0;
      for (Index i = 0; i < layer.in_channels(); ++i)
        for (Index o = 0; o < layer.out_channels(); ++o)
          for (Index k = 0; k < layer.num_coeffs; ++k) layer.theta(i, o, k) = coeffs[n++];
      const auto bias = load(prefix + ".bias", {layer.out_channels()});
      layer.bias = Eigen::Map<const VectorXd>(bias.data(), static_cast<Index>(bias.size()));
    }
    auto& dense = model.params.dense;
    const auto weights = load("dense.weights", {dense.weights.rows(), dense.weights.cols()});
    std::size_t n = 0;
    for (Index i = 0; i < dense.weights.rows(); ++i)
      for (Index c2 = 0; c2 < dense.weights.cols(); ++c2) dense.weights(i, c2) = weights[n++];
    const auto bias = load("dense.bias", {dense.bias.size()});
    dense.bias = Eigen::Map<const VectorXd>(bias.data(), static_cast<Index>(bias.size()));
    if (count != tensors.size()) throw DataError(K::Parse, where + ": unexpected extra tensors");
    return model;
  } catch (const json::exception& e) {
    throw DataError(K::Parse, where + ": " + e.what());
  } catch (const DataError&) {
    throw;
  } catch (const InvalidInput& e) {
    throw DataError(K::Invariant, where + ": " + e.what());
  }
}

inline void save_model(const Model& model, const fs::path& path) {
  write_text_file(path, model_to_json(model).dump(1) + "\n");
}

inline Model load_model(const fs::path& path) {
  const std::string text = read_text_file(path, "model");
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(DataError::Kind::Parse, path.string() + ": " + e.what());
  }
  return model_from_json(j, path.string());
}

// ---------------------------------------------------------------------------
// Synthetic planted-saliency connectomes

struct SynthConfig {
  int n_subjects = 500;
  int d_nodes = 20;
  int n_salient = 3;
  double effect_size = 0.8;
  double noise_sd = 0.5;
  std::uint64_t seed = 7;

  void validate() const {
    if (n_subjects < 4) throw InvalidInput("synth: need at least 4 subjects");
    if (d_nodes < 2) throw InvalidInput("synth: need at least 2 nodes");
    if (n_salient < 1 || n_salient >= d_nodes)
      throw InvalidInput("synth: salient node count must be in [1, " + std::to_string(d_nodes - 1) + "]");
    if (!(effect_size > 0.0) || !std::isfinite(effect_size)) throw InvalidInput("synth: effect size must be positive");
    if (!(noise_sd >= 0.0) || !std::isfinite(noise_sd)) throw InvalidInput("synth: noise sd must be >= 0");
  }
};

/// Symmetric matrix, zero diagonal, upper triangle drawn row-major and mirrored.
inline MatrixXd symmetric_normal(Index d, double sd, Rng& rng) {
  MatrixXd m = MatrixXd::Zero(d, d);
  for (Index i = 0; i < d; ++i)
    for (Index j = i + 1; j < d; ++j) m(i, j) = m(j, i) = sd * standard_normal(rng);
  return m;
}

/// Indicator of edges incident to the given nodes (symmetric, zero diagonal).
inline MatrixXd salient_edge_mask(Index d, std::span<const int> salient) {
  MatrixXd s = MatrixXd::Zero(d, d);
  for (int v : salient) {
    s.row(v).setOnes();
    s.col(v).setOnes();
  }
  s.diagonal().setZero();
  return s;
}

/// Shared base profile plus a class-signed shift on edges incident to the
/// first n_salient nodes plus symmetric noise. Labels alternate 0, 1, 0, ...
inline Dataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const Index d = cfg.d_nodes;
  const MatrixXd base = symmetric_normal(d, 1.0, rng);
  std::vector<int> salient(static_cast<std::size_t>(cfg.n_salient));
  for (int i = 0; i < cfg.n_salient; ++i) salient[static_cast<std::size_t>(i)] = i;
  const MatrixXd shift = (cfg.effect_size / 2.0) * salient_edge_mask(d, salient);

  const int width = static_cast<int>(std::to_string(cfg.n_subjects - 1).size());
  std::vector<Subject> subjects;
  std::vector<MatrixXd> magnitudes;
  subjects.reserve(static_cast<std::size_t>(cfg.n_subjects));
  for (int i = 0; i < cfg.n_subjects; ++i) {
    Subject s;
    std::string num = std::to_string(i);
    s.id = "sub" + std::string(static_cast<std::size_t>(width) - num.size(), '0') + num;
    s.label = i % 2;
    const double sign = s.label == 0 ? -1.0 : 1.0;
    s.features = base + sign * shift + symmetric_normal(d, cfg.noise_sd, rng);
    magnitudes.push_back(s.features.cwiseAbs());
    subjects.push_back(std::move(s));
  }
  Graph graph = build_group_graph(magnitudes);
  Dataset ds{std::move(graph), std::move(subjects), {"class0", "class1"}, std::move(salient)};
  validate_dataset(ds);
  return ds;
}

}  // namespace chebcam
