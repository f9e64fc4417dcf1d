// hmrgen: command-line front end for the hand mesh recovery pipeline.
// Subcommands: make-data, train-tokenizer, train-masked, infer, generate,
// eval, ablate. Every run writes a manifest next to its outputs.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "hmr/data_synth.hpp"
#include "hmr/inference.hpp"
#include "hmr/metrics.hpp"
#include "hmr/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hmr;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitIntegrity = 4;
constexpr int kExitNumeric = 5;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 1;
  std::string out;
};

ConfigMap load_config(const CommonOpts& opts) {
  ConfigMap cfg;
  if (!opts.config_path.empty()) cfg = ConfigMap::from_file(opts.config_path);
  for (const auto& kv : opts.overrides) cfg.apply_override(kv);
  return cfg;
}

void write_manifest(const std::string& out_dir, const std::string& command,
                    std::uint64_t seed, const ConfigMap& cfg,
                    const json& inputs, const json& outputs,
                    const json& timing) {
  RunManifest m;
  m.command = command;
  m.seed = seed;
  m.config = cfg.to_json();
  m.inputs = inputs;
  m.outputs = outputs;
  m.timing = timing;
  m.write((fs::path(out_dir) / "run_manifest.json").string());
}

hand::HandTemplate<double> template_from_dataset(const data::Dataset& ds) {
  return hand::build_synthetic_template(ds.config.template_config);
}

/// Prediction container written by infer/generate and consumed by eval.
struct Predictions {
  ad::Tensor<double> joints3d;  // (N, 21, 3)
  ad::Tensor<double> vertices;  // (N, V, 3)
  ad::Tensor<double> joints2d;  // (N, 21, 2), projected via predicted camera
  std::vector<double> aiti;

  void save(const std::string& dir, const json& meta) const {
    io::ArrayStore store;
    store.put_tensor("joints3d", joints3d);
    store.put_tensor("vertices", vertices);
    store.put_tensor("joints2d", joints2d);
    ad::Tensor<double> t({static_cast<int>(aiti.size())});
    for (std::size_t i = 0; i < aiti.size(); ++i)
      t[static_cast<std::int64_t>(i)] = aiti[i];
    store.put_tensor("aiti_seconds", t);
    store.metadata()["kind"] = "predictions";
    store.metadata()["extra"] = meta;
    store.save_dir(dir);
  }

  static Predictions load(const std::string& dir) {
    const auto store = io::ArrayStore::load_dir(dir);
    Predictions p;
    p.joints3d = store.get("joints3d").to_tensor<double>();
    p.vertices = store.get("vertices").to_tensor<double>();
    p.joints2d = store.get("joints2d").to_tensor<double>();
    const auto t = store.get("aiti_seconds").to_tensor<double>();
    p.aiti.assign(t.data(), t.data() + t.numel());
    return p;
  }
};

ad::Tensor<double> slice_points(const ad::Tensor<double>& all, int i, int n) {
  ad::Tensor<double> out({n, 3});
  std::copy(all.data() + static_cast<std::int64_t>(i) * n * 3,
            all.data() + static_cast<std::int64_t>(i + 1) * n * 3, out.data());
  return out;
}

// ---------------------------------------------------------------------------
// make-data
// ---------------------------------------------------------------------------

int cmd_make_data(const CommonOpts& opts, const data::SynthConfig& cfg) {
  fs::create_directories(opts.out);
  const auto t0 = std::chrono::steady_clock::now();
  data::make_dataset(cfg, opts.out);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ConfigMap cm;
  const json cfg_json = cfg.to_json();
  for (const auto& [k, v] : cfg_json.items()) cm.set("data." + k, v.dump());
  write_manifest(opts.out, "make-data", cfg.seed, cm, json::object(),
                 {{"dataset", to_hex(io::ArrayStore::load_dir(opts.out).content_hash())}},
                 {{"wall_seconds", secs}});
  std::cout << "wrote " << cfg.count << " samples to " << opts.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-tokenizer
// ---------------------------------------------------------------------------

int cmd_train_tokenizer(const CommonOpts& opts) {
  const ConfigMap cfg = load_config(opts);
  const auto tok_cfg = tokenizer::TokenizerConfig::from_config(cfg);
  const std::string data_dir = cfg.get_string("data.path", "");
  if (data_dir.empty()) throw ConfigError("train-tokenizer: data.path missing");
  const auto ds = data::load_dataset(data_dir);
  const auto tpl =
      hand::build_synthetic_template(ds.config.template_config).cast<float>();

  const auto steps = cfg.get_i64("train.steps", 20000);
  const int batch = cfg.get_int("train.batch", 64);
  const double lr = cfg.get_double("train.lr", 1e-4);
  const std::uint64_t seed = cfg.get_u64("train.seed", opts.seed);

  tokenizer::PoseTokenizer<float> tok(tok_cfg, seed);
  fs::create_directories(fs::path(opts.out).parent_path().empty()
                             ? "."
                             : fs::path(opts.out).parent_path().string());
  std::ofstream metrics_out(opts.out + ".metrics.jsonl");
  const auto t0 = std::chrono::steady_clock::now();
  const auto stats = tokenizer::train_tokenizer<float>(
      tok, ds.poses, tpl, steps, batch, lr, seed,
      [&](std::int64_t step, const tokenizer::VqLossParts<float>& parts) {
        json j;
        j["step"] = step;
        j["total"] = static_cast<double>(parts.total.value()[0]);
        j["l_theta"] = static_cast<double>(parts.l_theta);
        j["l_v"] = static_cast<double>(parts.l_v);
        j["l_j"] = static_cast<double>(parts.l_j);
        j["embed"] = static_cast<double>(parts.embed);
        j["commit"] = static_cast<double>(parts.commit);
        metrics_out << j.dump() << '\n';
        if (step % 500 == 0)
          std::cout << "step " << step << "  total " << j["total"] << "\n";
      });
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  tok.save(opts.out);
  const fs::path mdir = fs::path(opts.out).parent_path();
  write_manifest(mdir.empty() ? "." : mdir.string(), "train-tokenizer", seed,
                 cfg, {{"dataset", data_dir}},
                 {{"checkpoint", to_hex(io::file_hash(opts.out))}},
                 {{"wall_seconds", secs}, {"steps", stats.steps}});
  std::cout << "final loss " << stats.final_total << " -> " << opts.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-masked
// ---------------------------------------------------------------------------

int cmd_train_masked(const CommonOpts& opts, const std::string& tokenizer_path,
                     const std::string& data_dir) {
  const ConfigMap cfg = load_config(opts);
  auto tok = tokenizer::PoseTokenizer<float>::load(tokenizer_path);
  tok.freeze();
  const auto ds = data::load_dataset(data_dir);
  const auto tpl_d = hand::build_synthetic_template(ds.config.template_config);
  const auto tpl = tpl_d.cast<float>();

  auto model_cfg = transformer::TransformerConfig::from_config(cfg);
  model_cfg.num_tokens = tok.cfg.num_tokens;
  model_cfg.codebook_size = tok.cfg.codebook_size;
  model_cfg.image_size = ds.config.image_size;
  model_cfg.focal_px = ds.config.focal_px;
  model_cfg.num_labels = cfg.get_string("train.conditioning", "image") == "label"
                             ? ds.config.num_labels
                             : 0;

  train::MaskedTrainConfig tcfg;
  tcfg.steps = cfg.get_i64("train.steps", 10000);
  tcfg.batch_size = cfg.get_int("train.batch", 16);
  tcfg.lr = cfg.get_double("train.lr", 1e-5);
  tcfg.tau_max = cfg.get_double("train.tau_max", 0.7);
  tcfg.nll_all_positions = cfg.get_bool("train.loss_all_positions", false);
  tcfg.keypoint_noise_sigma = cfg.get_double("train.keypoint_noise_sigma", 0.0);
  tcfg.keypoint_dropout = cfg.get_double("train.keypoint_dropout", 0.0);
  tcfg.seed = cfg.get_u64("train.seed", opts.seed);
  tcfg.weights = train::LossWeights::from_config(cfg);
  tcfg.toggles.use_mask = cfg.get_bool("loss.use_mask", true);
  tcfg.toggles.use_mano = cfg.get_bool("loss.use_mano", true);
  tcfg.toggles.use_3d = cfg.get_bool("loss.use_3d", true);
  tcfg.toggles.use_2d = cfg.get_bool("loss.use_2d", true);
  tcfg.conditioning = cfg.get_string("train.conditioning", "image");

  transformer::ContextTransformer<float> model(model_cfg, tcfg.seed);
  std::ofstream metrics_out(opts.out + ".metrics.jsonl");
  const auto t0 = std::chrono::steady_clock::now();
  const auto stats = train::train_masked<float>(
      model, tok, tpl, ds, tcfg, [&](const train::StepMetrics& m) {
        metrics_out << m.to_json().dump() << '\n';
        if (m.step % 500 == 0)
          std::cout << "step " << m.step << "  total " << m.total << "\n";
      });
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  // Bundle the frozen tokenizer so inference needs a single checkpoint.
  io::ArrayStore bundle = model.to_store();
  bundle.merge(tok.to_store(), "tokenizer/");
  bundle.metadata()["tokenizer"] = tok.to_store().metadata();
  bundle.metadata()["tokenizer_config_hash"] = to_hex(tok.cfg.hash());
  bundle.metadata()["template"] = {
      {"vertex_budget", ds.config.template_config.vertex_budget},
      {"seed", ds.config.template_config.seed}};
  bundle.metadata()["train_steps"] = stats.steps;
  bundle.save_file(opts.out);

  const fs::path mdir = fs::path(opts.out).parent_path();
  write_manifest(mdir.empty() ? "." : mdir.string(), "train-masked", tcfg.seed,
                 cfg,
                 {{"dataset", data_dir},
                  {"tokenizer", to_hex(io::file_hash(tokenizer_path))}},
                 {{"checkpoint", to_hex(io::file_hash(opts.out))}},
                 {{"wall_seconds", secs}, {"steps", stats.steps}});
  std::cout << "final loss " << stats.final_total << " -> " << opts.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// checkpoint bundle loading
// ---------------------------------------------------------------------------

struct Bundle {
  transformer::ContextTransformer<float> model;
  tokenizer::PoseTokenizer<float> tok;
  hand::HandTemplate<double> tpl;
};

Bundle load_bundle(const std::string& path) {
  const auto store = io::ArrayStore::load_file(path);
  auto model = transformer::ContextTransformer<float>::from_store(store);
  io::ArrayStore tok_store = store.extract("tokenizer/", "tokenizer");
  auto tok = tokenizer::PoseTokenizer<float>::from_store(tok_store);
  if (store.metadata().value("tokenizer_config_hash", "") !=
      to_hex(tok.cfg.hash()))
    throw IntegrityError("checkpoint: tokenizer config hash mismatch");
  tok.freeze();
  model.freeze();
  hand::TemplateConfig tc;
  tc.vertex_budget = store.metadata().at("template").at("vertex_budget").get<int>();
  tc.seed = store.metadata().at("template").at("seed").get<std::uint64_t>();
  return {std::move(model), std::move(tok), hand::build_synthetic_template(tc)};
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

int cmd_infer(const CommonOpts& opts, const std::string& ckpt,
              const std::string& input, int iterations, double temperature,
              int hypotheses, int index, const std::string& export_obj,
              double noise_sigma, double noise_dropout) {
  Bundle bundle = load_bundle(ckpt);
  infer::Decoder<float> decoder(bundle.model, bundle.tok, bundle.tpl);
  const auto ds = data::load_dataset(input);

  infer::DecodeSchedule sched;
  sched.iterations = iterations;
  sched.temperature = temperature;

  std::vector<int> indices;
  if (index >= 0)
    indices.push_back(index);
  else
    for (int i = 0; i < ds.size(); ++i) indices.push_back(i);

  fs::create_directories(opts.out);
  if (!export_obj.empty()) fs::create_directories(export_obj);
  Rng rng = Rng(opts.seed).derive("decode");
  Rng noise_rng = Rng(opts.seed).derive("keypoint-noise");

  const int vv = bundle.tpl.vertex_count();
  Predictions preds;
  preds.joints3d = ad::Tensor<double>({static_cast<int>(indices.size()), 21, 3});
  preds.vertices = ad::Tensor<double>({static_cast<int>(indices.size()), vv, 3});
  preds.joints2d = ad::Tensor<double>({static_cast<int>(indices.size()), 21, 2});

  json samples = json::array();
  double aiti_total = 0.0;
  for (std::size_t row = 0; row < indices.size(); ++row) {
    const int i = indices[row];
    const auto sample = ds.sample(i);
    ad::Tensor<double> kp = data::keypoints_with_confidence(sample.joints2d);
    if (noise_sigma > 0.0 || noise_dropout > 0.0)
      data::apply_keypoint_noise(kp, noise_rng, noise_sigma, noise_dropout);

    std::vector<infer::Hypothesis> hyps;
    for (int h = 0; h < std::max(1, hypotheses); ++h)
      hyps.push_back(decoder.reconstruct(sample.image, kp, sched, rng));
    std::stable_sort(hyps.begin(), hyps.end(),
                     [](const infer::Hypothesis& a, const infer::Hypothesis& b) {
                       return a.confidence > b.confidence;
                     });
    const infer::Hypothesis& best = hyps.front();

    std::copy(best.mesh.joints.data(), best.mesh.joints.data() + 21 * 3,
              preds.joints3d.data() + static_cast<std::int64_t>(row) * 63);
    std::copy(best.mesh.vertices.data(), best.mesh.vertices.data() + vv * 3,
              preds.vertices.data() + static_cast<std::int64_t>(row) * vv * 3);
    const auto uv = hand::project(best.mesh.joints, best.camera);
    std::copy(uv.data(), uv.data() + 42,
              preds.joints2d.data() + static_cast<std::int64_t>(row) * 42);
    preds.aiti.push_back(best.aiti_seconds);
    aiti_total += best.aiti_seconds;

    json rec;
    rec["index"] = i;
    rec["hypotheses"] = json::array();
    for (const auto& h : hyps) rec["hypotheses"].push_back(h.to_json());
    samples.push_back(rec);

    if (!export_obj.empty())
      hand::export_obj(
          (fs::path(export_obj) / ("sample_" + std::to_string(i) + ".obj")).string(),
          best.mesh.vertices, bundle.tpl.faces);
  }

  std::ofstream(fs::path(opts.out) / "samples.json") << samples.dump(2) << '\n';
  preds.save((fs::path(opts.out) / "predictions").string(),
             {{"checkpoint", to_hex(io::file_hash(ckpt))}});
  const ConfigMap cfg = load_config(opts);
  write_manifest(opts.out, "infer", opts.seed, cfg,
                 {{"checkpoint", to_hex(io::file_hash(ckpt))}, {"dataset", input}},
                 {{"samples", samples.size()}},
                 {{"aiti_seconds", aiti_total / std::max<std::size_t>(1, indices.size())},
                  {"iterations", iterations}});
  std::cout << "reconstructed " << indices.size() << " samples, mean AITI "
            << aiti_total / std::max<std::size_t>(1, indices.size()) << " s\n";
  return 0;
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

int cmd_generate(const CommonOpts& opts, const std::string& ckpt, int n,
                 int label, int iterations, double temperature, int top_k,
                 const std::string& export_obj) {
  Bundle bundle = load_bundle(ckpt);
  infer::Decoder<float> decoder(bundle.model, bundle.tok, bundle.tpl);
  infer::DecodeSchedule sched;
  sched.iterations = iterations;
  sched.temperature = temperature;
  sched.top_k = top_k;

  Rng rng = Rng(opts.seed).derive("decode");
  const auto t0 = std::chrono::steady_clock::now();
  const auto hyps = label >= 0
                        ? decoder.generate_from_label(label, n, sched, rng)
                        : decoder.generate_unconditional(n, sched, rng);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  fs::create_directories(opts.out);
  if (!export_obj.empty()) fs::create_directories(export_obj);
  json out = json::array();
  std::vector<ad::Tensor<double>> meshes;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    out.push_back(hyps[i].to_json());
    meshes.push_back(hyps[i].mesh.vertices);
    if (!export_obj.empty() && i < 64)
      hand::export_obj(
          (fs::path(export_obj) / ("gen_" + std::to_string(i) + ".obj")).string(),
          hyps[i].mesh.vertices, bundle.tpl.faces);
  }
  std::ofstream(fs::path(opts.out) / "hypotheses.json") << out.dump(2) << '\n';

  json summary;
  summary["count"] = n;
  summary["mode"] = label >= 0 ? "label" : "unconditional";
  if (label >= 0) summary["label"] = label;
  if (n >= 2) summary["apd_mm"] = metrics::apd_mm(meshes);
  summary["mean_confidence"] = [&] {
    double acc = 0.0;
    for (const auto& h : hyps) acc += h.confidence;
    return acc / hyps.size();
  }();
  std::ofstream(fs::path(opts.out) / "summary.json") << summary.dump(2) << '\n';

  const ConfigMap cfg = load_config(opts);
  write_manifest(opts.out, "generate", opts.seed, cfg,
                 {{"checkpoint", to_hex(io::file_hash(ckpt))}},
                 {{"hypotheses", n}},
                 {{"wall_seconds", secs},
                  {"aiti_seconds", secs / std::max(1, n)}});
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

metrics::EvalReport evaluate_predictions(const Predictions& pred,
                                         const Predictions& gt,
                                         const std::string& csv_path) {
  const int n = pred.joints3d.dim(0);
  if (gt.joints3d.dim(0) != n)
    throw InputError("eval: prediction and ground-truth counts differ");
  const int vv = pred.vertices.dim(1);

  metrics::EvalReport report;
  std::vector<double> joint_errors_mm, vertex_errors_mm;
  std::ofstream csv;
  if (!csv_path.empty()) {
    csv.open(csv_path);
    csv << "index,pa_mpjpe_mm,pa_mpvpe_mm,mpjpe_mm,mpvpe_mm\n";
  }
  double f5 = 0, f15 = 0;
  std::map<std::string, double> pck_acc = {{"0.05", 0.0}, {"0.10", 0.0}, {"0.15", 0.0}};
  for (int i = 0; i < n; ++i) {
    const auto pj = slice_points(pred.joints3d, i, 21);
    const auto gj = slice_points(gt.joints3d, i, 21);
    const auto pv = slice_points(pred.vertices, i, vv);
    const auto gv = slice_points(gt.vertices, i, vv);
    const double paj = metrics::pa_mpjpe(pj, gj);
    const double pav = metrics::pa_mpvpe(pv, gv);
    report.pa_mpjpe += paj / n;
    report.pa_mpvpe += pav / n;
    report.mpjpe += metrics::mpjpe(pj, gj) / n;
    report.mpvpe += metrics::mpvpe(pv, gv) / n;
    f5 += metrics::f_score(pv, gv, 5.0) / n;
    f15 += metrics::f_score(pv, gv, 15.0) / n;

    // Pool per-point PA errors for the AUC curves.
    const auto aj = metrics::procrustes_align(pj, gj);
    for (int k = 0; k < 21; ++k) {
      double d = 0;
      for (int c = 0; c < 3; ++c) {
        const double q = aj[k * 3 + c] - gj[k * 3 + c];
        d += q * q;
      }
      joint_errors_mm.push_back(std::sqrt(d) * 1000.0);
    }
    const auto av = metrics::procrustes_align(pv, gv);
    for (int k = 0; k < vv; ++k) {
      double d = 0;
      for (int c = 0; c < 3; ++c) {
        const double q = av[k * 3 + c] - gv[k * 3 + c];
        d += q * q;
      }
      vertex_errors_mm.push_back(std::sqrt(d) * 1000.0);
    }

    ad::Tensor<double> p2({21, 2}), g2({21, 2});
    std::copy(pred.joints2d.data() + static_cast<std::int64_t>(i) * 42,
              pred.joints2d.data() + static_cast<std::int64_t>(i + 1) * 42,
              p2.data());
    std::copy(gt.joints2d.data() + static_cast<std::int64_t>(i) * 42,
              gt.joints2d.data() + static_cast<std::int64_t>(i + 1) * 42,
              g2.data());
    double umin = 1e18, umax = -1e18, vmin = 1e18, vmax = -1e18;
    for (int k = 0; k < 21; ++k) {
      umin = std::min(umin, g2[k * 2]);
      umax = std::max(umax, g2[k * 2]);
      vmin = std::min(vmin, g2[k * 2 + 1]);
      vmax = std::max(vmax, g2[k * 2 + 1]);
    }
    const double bbox = std::max(umax - umin, vmax - vmin);
    pck_acc["0.05"] += metrics::pck(p2, g2, bbox, 0.05) / n;
    pck_acc["0.10"] += metrics::pck(p2, g2, bbox, 0.10) / n;
    pck_acc["0.15"] += metrics::pck(p2, g2, bbox, 0.15) / n;

    if (csv.is_open())
      csv << i << ',' << paj << ',' << pav << ',' << metrics::mpjpe(pj, gj)
          << ',' << metrics::mpvpe(pv, gv) << '\n';
  }
  report.f5 = f5;
  report.f15 = f15;
  report.auc_j = metrics::auc(joint_errors_mm);
  report.auc_v = metrics::auc(vertex_errors_mm);
  report.pck = pck_acc;
  double aiti = 0.0;
  for (const double a : pred.aiti) aiti += a;
  report.aiti_seconds = pred.aiti.empty() ? 0.0 : aiti / pred.aiti.size();
  return report;
}

Predictions gt_from_dataset(const data::Dataset& ds) {
  const auto tpl = template_from_dataset(ds);
  Predictions gt;
  const int n = ds.size();
  const int vv = tpl.vertex_count();
  gt.joints3d = ds.joints3d;
  gt.joints2d = ds.joints2d;
  gt.vertices = ad::Tensor<double>({n, vv, 3});
  for (int i = 0; i < n; ++i) {
    const auto s = ds.sample(i);
    const auto mesh = hand::forward_kinematics(s.pose, s.shape, tpl);
    std::copy(mesh.vertices.data(), mesh.vertices.data() + vv * 3,
              gt.vertices.data() + static_cast<std::int64_t>(i) * vv * 3);
  }
  gt.aiti.assign(static_cast<std::size_t>(n), 0.0);
  return gt;
}

int cmd_eval(const CommonOpts& opts, const std::string& pred_dir,
             const std::string& gt_path, const std::string& csv) {
  const Predictions pred = Predictions::load(pred_dir);
  Predictions gt;
  if (fs::exists(fs::path(gt_path) / "manifest.json") &&
      io::ArrayStore::load_dir(gt_path, false).metadata().value("kind", "") ==
          "predictions") {
    gt = Predictions::load(gt_path);
  } else {
    gt = gt_from_dataset(data::load_dataset(gt_path));
  }
  const auto report = evaluate_predictions(pred, gt, csv);
  fs::create_directories(opts.out);
  std::ofstream(fs::path(opts.out) / "report.json") << report.to_json().dump(2)
                                                    << '\n';
  const ConfigMap cfg = load_config(opts);
  write_manifest(opts.out, "eval", opts.seed, cfg,
                 {{"pred", pred_dir}, {"gt", gt_path}},
                 {{"report", "report.json"}},
                 {{"aiti_seconds", report.aiti_seconds}});
  std::cout << report.to_json().dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

int cmd_ablate(const CommonOpts& opts, const std::string& sweep,
               const std::string& data_dir, const std::string& ckpt,
               std::int64_t steps) {
  fs::create_directories(opts.out);
  const ConfigMap cfg = load_config(opts);
  json rows = json::array();

  if (sweep == "iterations") {
    if (ckpt.empty()) throw ConfigError("ablate iterations: --ckpt required");
    Bundle bundle = load_bundle(ckpt);
    infer::Decoder<float> decoder(bundle.model, bundle.tok, bundle.tpl);
    const auto ds = data::load_dataset(data_dir);
    const auto gt = gt_from_dataset(ds);
    const int vv = bundle.tpl.vertex_count();
    for (const int t : {1, 3, 5}) {
      infer::DecodeSchedule sched;
      sched.iterations = t;
      Rng rng = Rng(opts.seed).derive("decode");
      Predictions pred;
      pred.joints3d = ad::Tensor<double>({ds.size(), 21, 3});
      pred.vertices = ad::Tensor<double>({ds.size(), vv, 3});
      pred.joints2d = ad::Tensor<double>({ds.size(), 21, 2});
      for (int i = 0; i < ds.size(); ++i) {
        const auto s = ds.sample(i);
        const auto h = decoder.reconstruct(
            s.image, data::keypoints_with_confidence(s.joints2d), sched, rng);
        std::copy(h.mesh.joints.data(), h.mesh.joints.data() + 63,
                  pred.joints3d.data() + static_cast<std::int64_t>(i) * 63);
        std::copy(h.mesh.vertices.data(), h.mesh.vertices.data() + vv * 3,
                  pred.vertices.data() + static_cast<std::int64_t>(i) * vv * 3);
        const auto uv = hand::project(h.mesh.joints, h.camera);
        std::copy(uv.data(), uv.data() + 42,
                  pred.joints2d.data() + static_cast<std::int64_t>(i) * 42);
        pred.aiti.push_back(h.aiti_seconds);
      }
      const auto report = evaluate_predictions(pred, gt, "");
      json row;
      row["iterations"] = t;
      row["pa_mpjpe_mm"] = report.pa_mpjpe;
      row["pa_mpvpe_mm"] = report.pa_mpvpe;
      row["aiti_seconds"] = report.aiti_seconds;
      rows.push_back(row);
      std::cout << "T=" << t << "  PA-MPJPE " << report.pa_mpjpe
                << " mm  PA-MPVPE " << report.pa_mpvpe << " mm  AITI "
                << report.aiti_seconds << " s\n";
    }
  } else if (sweep == "tokens") {
    const auto ds = data::load_dataset(data_dir);
    const auto tpl_d = hand::build_synthetic_template(ds.config.template_config);
    const auto tpl = tpl_d.cast<float>();
    for (const int m : {16, 64}) {
      auto tok_cfg = tokenizer::TokenizerConfig::from_config(cfg);
      tok_cfg.num_tokens = m;
      tokenizer::PoseTokenizer<float> tok(tok_cfg, opts.seed);
      tokenizer::train_tokenizer<float>(tok, ds.poses, tpl, steps,
                                        cfg.get_int("train.batch", 64),
                                        cfg.get_double("train.lr", 1e-4),
                                        opts.seed);
      double err = 0.0;
      for (int i = 0; i < ds.size(); ++i) {
        const auto s = ds.sample(i);
        const auto rec = tok.detokenize(tok.tokenize(s.pose));
        const auto m_gt =
            hand::forward_kinematics(s.pose, hand::ShapeParams::zero(), tpl_d);
        const auto m_rec =
            hand::forward_kinematics(rec, hand::ShapeParams::zero(), tpl_d);
        err += metrics::mpjpe(m_rec.joints, m_gt.joints) / ds.size();
      }
      json row;
      row["num_tokens"] = m;
      row["mean_joint_error_mm"] = err;
      rows.push_back(row);
      std::cout << "tokens=" << m << "  joint error " << err << " mm\n";
    }
  } else if (sweep == "mask-ratio" || sweep == "losses") {
    if (ckpt.empty()) throw ConfigError("ablate: --tokenizer checkpoint required");
    auto tok = tokenizer::PoseTokenizer<float>::load(ckpt);
    tok.freeze();
    const auto ds = data::load_dataset(data_dir);
    const auto tpl_d = hand::build_synthetic_template(ds.config.template_config);
    const auto tpl = tpl_d.cast<float>();

    struct Variant {
      std::string name;
      double tau_max;
      train::LossToggles toggles;
    };
    std::vector<Variant> variants;
    if (sweep == "mask-ratio") {
      for (const double t : {0.3, 0.5, 0.7, 1.0})
        variants.push_back({"tau_max=" + std::to_string(t), t, {}});
    } else {
      variants.push_back({"full", 0.7, {true, true, true, true}});
      variants.push_back({"l3d-only", 0.7, {false, false, true, false}});
      variants.push_back({"lmask-only", 0.7, {true, false, false, false}});
    }
    for (const auto& v : variants) {
      auto model_cfg = transformer::TransformerConfig::from_config(cfg);
      model_cfg.num_tokens = tok.cfg.num_tokens;
      model_cfg.codebook_size = tok.cfg.codebook_size;
      model_cfg.image_size = ds.config.image_size;
      model_cfg.focal_px = ds.config.focal_px;
      transformer::ContextTransformer<float> model(model_cfg, opts.seed);
      train::MaskedTrainConfig tcfg;
      tcfg.steps = steps;
      tcfg.batch_size = cfg.get_int("train.batch", 16);
      tcfg.lr = cfg.get_double("train.lr", 1e-5);
      tcfg.tau_max = v.tau_max;
      tcfg.toggles = v.toggles;
      tcfg.seed = opts.seed;
      train::train_masked<float>(model, tok, tpl, ds, tcfg);

      infer::Decoder<float> decoder(model, tok, tpl_d);
      infer::DecodeSchedule sched;
      Rng rng = Rng(opts.seed).derive("decode");
      double pa = 0.0;
      for (int i = 0; i < ds.size(); ++i) {
        const auto s = ds.sample(i);
        const auto h = decoder.reconstruct(
            s.image, data::keypoints_with_confidence(s.joints2d), sched, rng);
        pa += metrics::pa_mpjpe(h.mesh.joints, s.joints3d) / ds.size();
      }
      json row;
      row["variant"] = v.name;
      row["steps"] = steps;
      row["pa_mpjpe_mm"] = pa;
      rows.push_back(row);
      std::cout << v.name << "  PA-MPJPE " << pa << " mm\n";
    }
  } else {
    throw ConfigError("ablate: unknown sweep '" + sweep + "'");
  }

  std::ofstream(fs::path(opts.out) / ("sweep_" + sweep + ".json"))
      << rows.dump(2) << '\n';
  write_manifest(opts.out, "ablate", opts.seed, cfg,
                 {{"dataset", data_dir}, {"sweep", sweep}},
                 {{"rows", rows.size()}}, json::object());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative masked modeling for 3D hand mesh recovery"};
  app.require_subcommand(1);

  CommonOpts opts;
  data::SynthConfig synth;
  std::string tokenizer_path, data_dir, ckpt, input, sweep = "iterations";
  std::string export_obj, pred_dir, gt_path, csv;
  int iterations = 5, hypotheses = 1, index = -1, n = 16, label = -1, top_k = 0;
  double temperature = 1.0, noise_sigma = 0.0, noise_dropout = 0.0;
  std::int64_t ablate_steps = 2000;
  bool no_images = false;

  auto add_common = [&](CLI::App* sub, bool with_config = true) {
    sub->add_option("--seed", opts.seed, "master seed");
    sub->add_option("--out", opts.out, "output path")->required();
    if (with_config) {
      sub->add_option("--config", opts.config_path, "key=value config file");
      sub->add_option("--override", opts.overrides, "dotted key=value override");
    }
  };

  CLI::App* mk = app.add_subcommand("make-data", "generate a synthetic dataset");
  add_common(mk, false);
  mk->add_option("--count", synth.count, "sample count");
  mk->add_flag("--no-images", no_images, "skip proxy image rendering");
  mk->add_option("--labels", synth.num_labels, "label vocabulary size (0 = off)");
  mk->add_option("--image-size", synth.image_size);
  mk->add_option("--focal", synth.focal_px);
  mk->add_option("--beta-range", synth.beta_range);
  mk->add_option("--template-budget", synth.template_config.vertex_budget);
  mk->add_option("--template-seed", synth.template_config.seed);

  CLI::App* tt = app.add_subcommand("train-tokenizer", "phase 1: VQ pose tokenizer");
  add_common(tt);

  CLI::App* tm = app.add_subcommand("train-masked", "phase 2: masked transformer");
  add_common(tm);
  tm->add_option("--tokenizer", tokenizer_path, "frozen tokenizer checkpoint")
      ->required();
  tm->add_option("--data", data_dir, "training dataset directory")->required();

  CLI::App* inf = app.add_subcommand("infer", "reconstruct meshes from a dataset");
  add_common(inf);
  inf->add_option("--ckpt", ckpt, "bundled checkpoint")->required();
  inf->add_option("--input", input, "dataset directory")->required();
  inf->add_option("--iterations", iterations, "decoding iterations T");
  inf->add_option("--temperature", temperature, "sampling temperature");
  inf->add_option("--hypotheses", hypotheses, "ranked hypotheses per sample");
  inf->add_option("--index", index, "single sample index (-1 = all)");
  inf->add_option("--export-obj", export_obj, "directory for OBJ meshes");
  inf->add_option("--noise-sigma", noise_sigma, "keypoint noise sigma (px)");
  inf->add_option("--noise-dropout", noise_dropout, "keypoint dropout prob");

  CLI::App* gen = app.add_subcommand("generate", "sample meshes from the prior");
  add_common(gen);
  gen->add_option("--ckpt", ckpt, "bundled checkpoint")->required();
  gen->add_option("-n,--num", n, "number of hypotheses");
  gen->add_option("--label", label, "conditioning label (-1 = unconditional)");
  gen->add_option("--iterations", iterations);
  gen->add_option("--temperature", temperature);
  gen->add_option("--top-k", top_k, "per-position candidate restriction");
  gen->add_option("--export-obj", export_obj);

  CLI::App* ev = app.add_subcommand("eval", "score predictions against ground truth");
  add_common(ev);
  ev->add_option("--pred", pred_dir, "prediction container")->required();
  ev->add_option("--gt", gt_path, "dataset dir or prediction container")
      ->required();
  ev->add_option("--csv", csv, "per-sample error CSV path");

  CLI::App* ab = app.add_subcommand("ablate", "desk-scale ablation sweeps");
  add_common(ab);
  ab->add_option("--sweep", sweep, "iterations | tokens | mask-ratio | losses");
  ab->add_option("--data", data_dir, "dataset directory")->required();
  ab->add_option("--ckpt", ckpt, "checkpoint (bundle or tokenizer)");
  ab->add_option("--tokenizer", tokenizer_path, "tokenizer checkpoint");
  ab->add_option("--steps", ablate_steps, "training steps per variant");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (mk->parsed()) {
      synth.with_images = !no_images;
      synth.seed = opts.seed;
      return cmd_make_data(opts, synth);
    }
    if (tt->parsed()) return cmd_train_tokenizer(opts);
    if (tm->parsed()) return cmd_train_masked(opts, tokenizer_path, data_dir);
    if (inf->parsed())
      return cmd_infer(opts, ckpt, input, iterations, temperature, hypotheses,
                       index, export_obj, noise_sigma, noise_dropout);
    if (gen->parsed())
      return cmd_generate(opts, ckpt, n, label, iterations, temperature, top_k,
                          export_obj);
    if (ev->parsed()) return cmd_eval(opts, pred_dir, gt_path, csv);
    if (ab->parsed())
      return cmd_ablate(opts, sweep, data_dir,
                        ckpt.empty() ? tokenizer_path : ckpt, ablate_steps);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return kExitIntegrity;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
