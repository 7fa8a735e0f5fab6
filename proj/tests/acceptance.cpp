// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Usage: acceptance [work_dir]

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "chebcam/chebcam.hpp"
#include "chebcam/cli.hpp"
#include "oracles.hpp"

using namespace chebcam;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double weighted_sum(const MatrixXd& out, const MatrixXd& r) { return out.cwiseProduct(r).sum(); }

// ---------------------------------------------------------------------------
// 1. Gradients

Outcome gradient_suite() {
  Rng rng(101);
  const Index d = 6;
  const auto lt = make_scaled_laplacian(Graph(oracle::random_weights(d, rng)));
  double worst = 0.0;
  std::string worst_name;
  auto track = [&](const std::string& name, double err) {
    if (err > worst) {
      worst = err;
      worst_name = name;
    }
  };

  {  // ChebConv
    ChebConvParams p(3, 2, 3);
    p.coeffs = oracle::random_matrix(9, 2, rng);
    p.bias = oracle::random_matrix(2, 1, rng);
    NodeTensor x(2, d, oracle::random_matrix(2 * d, 3, rng));
    const MatrixXd r = oracle::random_matrix(2 * d, 2, rng);
    ChebConvCache cache;
    cheb_conv_forward(p, lt, x, &cache);
    const auto g = cheb_conv_backward(p, lt, cache, NodeTensor(2, d, r));
    auto f = [&] { return weighted_sum(cheb_conv_forward(p, lt, x).data, r); };
    track("chebconv.coeffs", oracle::max_relative_error(g.grad_params.coeffs, oracle::central_difference(p.coeffs, f)));
    track("chebconv.bias", oracle::max_relative_error(g.grad_params.bias, oracle::central_difference(p.bias, f)));
    track("chebconv.input", oracle::max_relative_error(g.grad_x.data, oracle::central_difference(x.data, f)));
  }
  {  // ReLU
    MatrixXd x = oracle::random_matrix(8, 3, rng);
    const MatrixXd r = oracle::random_matrix(8, 3, rng);
    auto f = [&] { return weighted_sum(relu_forward(x), r); };
    track("relu", oracle::max_relative_error(relu_backward(r, x), oracle::central_difference(x, f)));
  }
  {  // Dropout with a fixed mask
    MatrixXd x = oracle::random_matrix(8, 3, rng);
    const MatrixXd r = oracle::random_matrix(8, 3, rng);
    const auto mask = dropout_forward(x, 0.5, Mode::Train, rng).mask;
    auto f = [&] { return weighted_sum(x.cwiseProduct(mask), r); };
    track("dropout", oracle::max_relative_error(dropout_backward(r, mask), oracle::central_difference(x, f)));
  }
  {  // GAP
    NodeTensor x(3, d, oracle::random_matrix(3 * d, 4, rng));
    const MatrixXd r = oracle::random_matrix(3, 4, rng);
    auto f = [&] { return weighted_sum(gap_forward(x), r); };
    track("gap", oracle::max_relative_error(gap_backward(r, d).data, oracle::central_difference(x.data, f)));
  }
  {  // Dense
    DenseParams p{oracle::random_matrix(4, 2, rng), oracle::random_matrix(2, 1, rng)};
    MatrixXd pooled = oracle::random_matrix(5, 4, rng);
    const MatrixXd r = oracle::random_matrix(5, 2, rng);
    const auto g = dense_backward(p, pooled, r);
    auto f = [&] { return weighted_sum(dense_forward(p, pooled), r); };
    track("dense.weights", oracle::max_relative_error(g.grad_params.weights, oracle::central_difference(p.weights, f)));
    track("dense.bias", oracle::max_relative_error(g.grad_params.bias, oracle::central_difference(p.bias, f)));
    track("dense.input", oracle::max_relative_error(g.grad_pooled, oracle::central_difference(pooled, f)));
  }
  {  // Softmax cross-entropy
    MatrixXd logits = 2.0 * oracle::random_matrix(5, 2, rng);
    const std::vector<int> labels{0, 1, 1, 0, 1};
    const auto g = softmax_cross_entropy(logits, labels).grad_logits;
    auto f = [&] { return softmax_cross_entropy(logits, labels).loss; };
    track("softmax_ce", oracle::max_relative_error(g, oracle::central_difference(logits, f)));
  }
  {  // Composed model: d=6, channels [4, 3], K=3, no dropout, with the L2 term
    ModelConfig cfg;
    cfg.channels = {4, 3};
    cfg.num_coeffs = 3;
    cfg.dropout_layers = {};
    cfg.input_channels = 6;
    Model model = init_model(cfg, 5);
    for (auto& l : model.params.conv) l.bias = 0.1 * oracle::random_matrix(l.bias.size(), 1, rng);
    model.params.dense.bias = 0.1 * oracle::random_matrix(2, 1, rng);
    const NodeTensor batch(4, d, oracle::random_matrix(4 * d, 6, rng));
    const std::vector<int> labels{0, 1, 0, 1};
    const double decay = 5e-4;
    const auto lg = loss_and_gradients(model, lt, batch, labels, decay, 0);
    auto f = [&] {
      return softmax_cross_entropy(model_forward(model, lt, batch, Mode::Eval).logits, labels).loss +
             l2_penalty(model.params, decay).loss;
    };
    for_each_tensor(
        [&](const TensorInfo& info, auto& p, const auto& g) {
          track("model." + info.name, oracle::max_relative_error(g, oracle::central_difference(p, f)));
        },
        model.params, lg.grads);
  }
  return {worst < 1e-5, "max rel err " + fmt("%.2e", worst) + " (" + worst_name + ")"};
}

// ---------------------------------------------------------------------------
// 2. Spectral oracle

Outcome spectral_oracle() {
  Rng rng(202);
  double worst_cheb = 0.0;
  double eig_lo = std::numeric_limits<double>::infinity();
  double eig_hi = -std::numeric_limits<double>::infinity();
  for (int g = 0; g < 20; ++g) {
    const Index n = 2 + static_cast<Index>(uniform_index(rng, 11));
    const MatrixXd w = oracle::random_weights(n, rng, uniform(rng, 0.2, 1.0));
    const MatrixXd l = normalized_laplacian(Graph(w));
    const VectorXd eig = oracle::eigenvalues(l);
    eig_lo = std::min(eig_lo, eig.minCoeff());
    eig_hi = std::max(eig_hi, eig.maxCoeff());
    const auto lt = make_scaled_laplacian(Graph(w));
    const MatrixXd x = oracle::random_matrix(n, 3, rng);
    for (int k = 1; k <= 10; ++k) {
      const auto stack = cheb_apply(lt, x, k);
      const auto ref = oracle::chebyshev_spectral(lt.matrix, x, k);
      for (int j = 0; j < k; ++j) worst_cheb = std::max(worst_cheb, (stack[j] - ref[j]).cwiseAbs().maxCoeff());
    }
  }
  const bool eig_ok = eig_lo >= -1e-9 && eig_hi <= 2.0 + 1e-9;
  return {worst_cheb < 1e-8 && eig_ok, "max |cheb - spectral| " + fmt("%.2e", worst_cheb) + ", eig range [" +
                                           fmt("%.3g", eig_lo) + ", " + fmt("%.12g", eig_hi) + "]"};
}

// ---------------------------------------------------------------------------
// 3. Locality

Outcome locality() {
  Rng rng(303);
  const Index n = 15;
  MatrixXd w = MatrixXd::Zero(n, n);
  for (Index i = 0; i + 1 < n; ++i) w(i, i + 1) = w(i + 1, i) = uniform(rng, 0.5, 1.5);
  const auto lt = make_scaled_laplacian(Graph(w));
  const auto hops = oracle::hop_distances(w);
  long violations = 0, checked = 0;
  for (int k : {1, 2, 5}) {
    std::vector<double> theta(static_cast<std::size_t>(k));
    for (double& t : theta) t = uniform(rng, -1.0, 1.0);
    const MatrixXd f = chebyshev_filter_matrix(lt, theta);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j)
        if (hops[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] > k - 1) {
          ++checked;
          if (f(i, j) != 0.0) ++violations;
        }
  }
  return {violations == 0, std::to_string(checked) + " out-of-reach entries, " + std::to_string(violations) + " nonzero"};
}

// ---------------------------------------------------------------------------
// 4. Permutation equivariance

Outcome permutation_equivariance() {
  SynthConfig sc;
  sc.n_subjects = 8;
  sc.d_nodes = 12;
  sc.n_salient = 3;
  sc.seed = 404;
  const Dataset ds = generate_synthetic(sc);
  ModelConfig cfg;
  cfg.channels = {6, 5};
  cfg.num_coeffs = 4;
  cfg.dropout_layers = {1};
  cfg.input_channels = 12;
  const Model model = init_model(cfg, 9);
  const auto lt = make_scaled_laplacian(ds.graph);

  std::vector<const MatrixXd*> xs;
  for (const auto& s : ds.subjects) xs.push_back(&s.features);
  const auto base = model_forward(model, lt, make_batch(xs), Mode::Eval);

  Rng rng(405);
  double worst_logit = 0.0, worst_cam = 0.0, lambda_drift = 0.0;
  for (int t = 0; t < 10; ++t) {
    const auto perm = oracle::random_permutation(12, rng);
    const MatrixXd p = oracle::permutation_matrix(perm);
    const Graph gp(p * ds.graph.weights() * p.transpose());
    // lambda_max is a graph invariant: scale with the same value.
    const auto lt_p = scale_laplacian(normalized_laplacian(gp), lt.lambda_max, lt.converged);
    lambda_drift = std::max(lambda_drift, std::abs(make_scaled_laplacian(gp).lambda_max - lt.lambda_max));
    std::vector<MatrixXd> permuted;
    for (const auto& s : ds.subjects) permuted.push_back(p * s.features);
    const auto out = model_forward(model, lt_p, make_batch(std::span<const MatrixXd>(permuted)), Mode::Eval);
    worst_logit = std::max(worst_logit, (out.logits - base.logits).cwiseAbs().maxCoeff());
    for (Index s = 0; s < out.last_conv_features.batch; ++s) {
      const MatrixXd cam = cam_scores(base.last_conv_features.sample(s), model.params.dense);
      const MatrixXd cam_p = cam_scores(out.last_conv_features.sample(s), model.params.dense);
      worst_cam = std::max(worst_cam, (p * cam - cam_p).cwiseAbs().maxCoeff());
    }
  }
  return {worst_logit < 1e-9 && worst_cam < 1e-9, "max |dlogit| " + fmt("%.2e", worst_logit) + ", max |dCAM| " +
                                                      fmt("%.2e", worst_cam) + " (lambda re-estimation drift " +
                                                      fmt("%.1e", lambda_drift) + ")"};
}

// ---------------------------------------------------------------------------
// 5. CAM identity and count conservation

Outcome cam_identity() {
  SynthConfig sc;
  sc.n_subjects = 30;
  sc.d_nodes = 10;
  sc.n_salient = 2;
  sc.seed = 505;
  const Dataset ds = generate_synthetic(sc);
  const auto lt = make_scaled_laplacian(ds.graph);
  Rng rng(506);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    ModelConfig cfg;
    cfg.channels = {5, 4, 3};
    cfg.num_coeffs = 3;
    cfg.dropout_layers = {1};
    cfg.input_channels = 10;
    Model model = init_model(cfg, 1000 + static_cast<std::uint64_t>(t));
    model.params.dense.bias = oracle::random_matrix(2, 1, rng);
    for (auto& l : model.params.conv) l.bias = 0.1 * oracle::random_matrix(l.bias.size(), 1, rng);
    const auto& subject = ds.subjects[uniform_index(rng, ds.subjects.size())];
    const int c = static_cast<int>(uniform_index(rng, 2));
    const MatrixXd* x = &subject.features;
    const MatrixXd logits = predict_logits(model, lt, std::span<const MatrixXd* const>(&x, 1));
    const auto cam = class_activation_map(model, lt, subject, c);
    worst = std::max(worst, std::abs(cam.scores.mean() - (logits(0, c) - model.params.dense.bias(c))));
  }

  std::vector<RunArtifacts> runs(3);
  for (std::size_t r = 0; r < runs.size(); ++r) {
    runs[r].splits = make_stratified_folds(ds.labels(), 5, 600 + r);
    ModelConfig cfg;
    cfg.channels = {4};
    cfg.num_coeffs = 2;
    cfg.dropout_layers = {};
    cfg.input_channels = 10;
    for (int f = 0; f < 5; ++f) runs[r].fold_models.push_back(init_model(cfg, 700 + 10 * r + static_cast<std::uint64_t>(f)));
  }
  bool counts_ok = true;
  for (int k : {1, 3, 10}) {
    const auto sal = population_saliency(runs, ds, lt, k);
    const long total = std::accumulate(sal.topk_counts.begin(), sal.topk_counts.end(), 0L);
    counts_ok = counts_ok && total == static_cast<long>(k) * 30L * 3L;
  }
  return {worst < 1e-9 && counts_ok,
          "max |mean(M_c) - (logit_c - b_c)| " + fmt("%.2e", worst) + ", count totals " + (counts_ok ? "exact" : "WRONG")};
}

// ---------------------------------------------------------------------------
// 6. Planted-saliency recovery (shared with 9)

struct PlantedRun {
  Dataset ds;
  CvResult cv;
  PopulationSaliency saliency;
  double seconds = 0.0;
};

const PlantedRun& planted_run() {
  static std::optional<PlantedRun> cached;
  if (cached) return *cached;
  const auto t0 = std::chrono::steady_clock::now();
  SynthConfig sc;  // n=500, d=20, 3 salient, effect 0.8, noise 0.5, seed 7
  PlantedRun pr{generate_synthetic(sc), {}, {}, 0.0};
  const auto lt = make_scaled_laplacian(pr.ds.graph);
  ModelConfig mc;
  mc.channels = {16, 16, 32};
  mc.num_coeffs = 5;
  mc.dropout_layers = {1};
  mc.input_channels = 20;
  TrainConfig tc;
  tc.total_steps = 200;
  tc.batch_size = 50;
  CvOptions opt;
  opt.n_runs = 2;
  opt.n_folds = 5;
  pr.cv = run_cross_validation(pr.ds, lt, mc, tc, opt);
  std::vector<RunArtifacts> runs;
  for (const auto& run : pr.cv.runs) runs.push_back(artifacts_from(run));
  pr.saliency = population_saliency(runs, pr.ds, lt, 3);
  pr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  cached = std::move(pr);
  return *cached;
}

Outcome planted_recovery() {
  const auto& pr = planted_run();
  const auto ranked = rank_nodes(pr.saliency.topk_counts);
  std::vector<int> top3(ranked.begin(), ranked.begin() + 3);
  std::sort(top3.begin(), top3.end());
  const bool recovered = top3 == *pr.ds.ground_truth_salient;
  const bool accurate = pr.cv.grand_mean >= 0.90;
  std::ostringstream s;
  s << "grand mean " << fmt("%.4f", pr.cv.grand_mean) << " (>= 0.90 " << (accurate ? "ok" : "FAIL") << "); top-3 nodes";
  for (int i = 0; i < 3; ++i) s << ' ' << ranked[static_cast<std::size_t>(i)] << '(' << pr.saliency.topk_counts[static_cast<std::size_t>(ranked[static_cast<std::size_t>(i)])] << ')';
  s << " vs planted";
  for (int v : *pr.ds.ground_truth_salient) s << ' ' << v << '(' << pr.saliency.topk_counts[static_cast<std::size_t>(v)] << ')';
  s << " (" << (recovered ? "ok" : "FAIL") << "); " << fmt("%.0f", pr.seconds) << " s";
  return {accurate && recovered && pr.seconds < 300.0, s.str()};
}

// ---------------------------------------------------------------------------
// 7. Optimizer oracle

Outcome optimizer_oracle() {
  const auto ref = oracle::adam_trajectory_quadratic(0.0, 3.0, 0.1, 50);
  Parameters p;
  p.dense.weights = MatrixXd::Zero(1, 1);
  p.dense.bias = VectorXd::Zero(1);
  AdamState state(p);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    Parameters g = p.zeros_like();
    g.dense.weights(0, 0) = p.dense.weights(0, 0) - 3.0;
    adam_step(p, g, state, TrainConfig{}, 0.1);
    worst = std::max(worst, std::abs(p.dense.weights(0, 0) - ref[static_cast<std::size_t>(t)]));
  }

  ModelConfig cfg;
  cfg.channels = {4, 3};
  cfg.num_coeffs = 3;
  cfg.dropout_layers = {1};
  cfg.input_channels = 5;
  Model model = init_model(cfg, 77);
  const Parameters before = model.params;
  AdamState fresh(model.params);
  for (int i = 0; i < 10; ++i) adam_step(model.params, model.params.zeros_like(), fresh, TrainConfig{}, 1e-3);
  bool bitwise = true;
  for_each_tensor(
      [&](const TensorInfo&, const auto& a, const auto& b) {
        bitwise = bitwise && std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
      },
      model.params, before);
  return {worst < 1e-12 && bitwise, "max |x - x_ref| over 50 steps " + fmt("%.2e", worst) + ", zero-gradient steps " +
                                        (bitwise ? "bitwise no-op" : "CHANGED parameters")};
}

// ---------------------------------------------------------------------------
// 8. Reproducibility through the CLI

int invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "chebcam");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

Outcome reproducibility(const fs::path& work) {
  const fs::path root = work / "reproducibility";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string data = (root / "data").string();
  if (invoke({"synth", "--subjects", "120", "--nodes", "10", "--salient", "2", "--seed", "808", "--out", data}) != 0)
    return {false, "synth failed"};
  auto pipeline = [&](const std::string& name, bool parallel) {
    const std::string out = (root / name).string();
    std::vector<std::string> args{"train",   "--data",  data,         "--out",  out,        "--runs",
                                  "2",       "--folds", "4",          "--steps", "40",      "--batch",
                                  "20",      "--channels", "8,8",     "--k-coeffs", "3",    "--seed",
                                  "808"};
    if (parallel) args.push_back("--parallel");
    return invoke(args) == 0 && invoke({"attribute", "--results", out, "--top-k", "3"}) == 0;
  };
  if (!pipeline("a", false) || !pipeline("b", false) || !pipeline("p", true)) return {false, "pipeline failed"};

  std::vector<fs::path> files{"metrics.json", "saliency.csv", "folds.json"};
  for (const auto& e : fs::directory_iterator(root / "a" / "models")) files.push_back(fs::path("models") / e.path().filename());
  std::sort(files.begin(), files.end());
  int differing = 0;
  for (const auto& f : files) {
    const std::string a = read_text_file(root / "a" / f, "a");
    if (read_text_file(root / "b" / f, "b") != a) ++differing;
    if (read_text_file(root / "p" / f, "p") != a) ++differing;
  }
  return {differing == 0 && files.size() == 3 + 8,
          std::to_string(files.size()) + " files x 3 executions (2 sequential, 1 parallel), " +
              std::to_string(differing) + " differing"};
}

// ---------------------------------------------------------------------------
// 9. Cross-validation structure

Outcome cv_structure() {
  const auto& pr = planted_run();
  const auto labels = pr.ds.labels();
  const double p0 = static_cast<double>(std::count(labels.begin(), labels.end(), 0)) / static_cast<double>(labels.size());
  bool tested_once = true, ratios_ok = true;
  double worst_ratio = 0.0;
  auto check_assignment = [&](const std::vector<FoldSplit>& splits) {
    std::vector<int> tested(labels.size(), 0);
    for (const auto& s : splits) {
      long c0 = 0;
      for (int i : s.test_idx) {
        ++tested[static_cast<std::size_t>(i)];
        if (labels[static_cast<std::size_t>(i)] == 0) ++c0;
      }
      const double dev = std::abs(static_cast<double>(c0) - p0 * static_cast<double>(s.test_idx.size()));
      worst_ratio = std::max(worst_ratio, dev);
      ratios_ok = ratios_ok && dev <= 1.0;
    }
    for (int t : tested) tested_once = tested_once && t == 1;
  };
  for (const auto& run : pr.cv.runs) check_assignment(run.splits);
  for (std::uint64_t seed = 0; seed < 10; ++seed) check_assignment(make_stratified_folds(labels, 10, seed));

  auto decays = [](std::initializer_list<double> accs) {
    LrSchedule s(1e-3, 0.5);
    int n = 0;
    for (double a : accs) n += s.observe(a) ? 1 : 0;
    return n;
  };
  const int d1 = decays({0.8, 0.7, 0.6});
  const int d2 = decays({0.8, 0.7, 0.9});
  return {tested_once && ratios_ok && d1 == 1 && d2 == 0,
          std::string("each subject tested once per run: ") + (tested_once ? "yes" : "NO") +
              ", worst class-count deviation " + fmt("%.2f", worst_ratio) + ", lr decays " + std::to_string(d1) +
              " and " + std::to_string(d2)};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "chebcam_acceptance";
  fs::create_directories(work);

  struct Criterion {
    int id;
    const char* name;
    double budget_seconds;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient suite", 30, gradient_suite},
      {2, "spectral oracle", 10, spectral_oracle},
      {3, "locality", 5, locality},
      {4, "permutation equivariance", 10, permutation_equivariance},
      {5, "CAM identity", 10, cam_identity},
      {6, "planted-saliency recovery", 300, planted_recovery},
      {7, "optimizer oracle", 10, optimizer_oracle},
      {8, "reproducibility", 300, [&] { return reproducibility(work); }},
      {9, "cross-validation structure", 300, cv_structure},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = o.pass && secs < c.budget_seconds;
    if (!pass) ++failures;
    std::printf("[%s] %d. %s: %s [%.2f s]\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
