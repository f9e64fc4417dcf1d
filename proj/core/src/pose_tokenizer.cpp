#include "hmr/pose_tokenizer.hpp"

namespace hmr::tokenizer {

int TokenizerConfig::upsample_stages() const {
  int stages = 0, m = kPosePositions;
  while (m < num_tokens) {
    m *= 2;
    ++stages;
  }
  return stages;
}

void TokenizerConfig::validate() const {
  if (codebook_size < 2) throw ConfigError("tokenizer: codebook_size must be >= 2");
  if (code_dim < 1) throw ConfigError("tokenizer: code_dim must be >= 1");
  int m = kPosePositions;
  while (m < num_tokens) m *= 2;
  if (m != num_tokens)
    throw ConfigError("tokenizer: num_tokens must be 16 * 2^n");
  if (width < 4) throw ConfigError("tokenizer: width too small");
  if (!(ema_decay > 0.0 && ema_decay < 1.0))
    throw ConfigError("tokenizer: ema_decay must be in (0, 1)");
  if (reset_interval < 1) throw ConfigError("tokenizer: bad reset_interval");
}

nlohmann::json TokenizerConfig::to_json() const {
  nlohmann::json j;
  j["codebook_size"] = codebook_size;
  j["code_dim"] = code_dim;
  j["num_tokens"] = num_tokens;
  j["width"] = width;
  j["res_blocks"] = res_blocks;
  j["ema_decay"] = ema_decay;
  j["ema_eps"] = ema_eps;
  j["reset_interval"] = reset_interval;
  j["lambda_re"] = lambda_re;
  j["lambda_e"] = lambda_e;
  j["lambda_alpha"] = lambda_alpha;
  j["lambda_theta"] = lambda_theta;
  j["lambda_v"] = lambda_v;
  j["lambda_j"] = lambda_j;
  return j;
}

TokenizerConfig TokenizerConfig::from_json(const nlohmann::json& j) {
  TokenizerConfig c;
  c.codebook_size = j.at("codebook_size").get<int>();
  c.code_dim = j.at("code_dim").get<int>();
  c.num_tokens = j.at("num_tokens").get<int>();
  c.width = j.at("width").get<int>();
  c.res_blocks = j.at("res_blocks").get<int>();
  c.ema_decay = j.at("ema_decay").get<double>();
  c.ema_eps = j.at("ema_eps").get<double>();
  c.reset_interval = j.at("reset_interval").get<int>();
  c.lambda_re = j.at("lambda_re").get<double>();
  c.lambda_e = j.at("lambda_e").get<double>();
  c.lambda_alpha = j.at("lambda_alpha").get<double>();
  c.lambda_theta = j.at("lambda_theta").get<double>();
  c.lambda_v = j.at("lambda_v").get<double>();
  c.lambda_j = j.at("lambda_j").get<double>();
  return c;
}

std::uint64_t TokenizerConfig::hash() const {
  const std::string s = to_json().dump();
  return fnv1a64(s.data(), s.size());
}

TokenizerConfig TokenizerConfig::from_config(const ConfigMap& cfg,
                                             const std::string& p) {
  TokenizerConfig c;
  c.codebook_size = cfg.get_int(p + "codebook_size", c.codebook_size);
  c.code_dim = cfg.get_int(p + "code_dim", c.code_dim);
  c.num_tokens = cfg.get_int(p + "num_tokens", c.num_tokens);
  c.width = cfg.get_int(p + "width", c.width);
  c.res_blocks = cfg.get_int(p + "res_blocks", c.res_blocks);
  c.ema_decay = cfg.get_double(p + "ema_decay", c.ema_decay);
  c.ema_eps = cfg.get_double(p + "ema_eps", c.ema_eps);
  c.reset_interval = cfg.get_int(p + "reset_interval", c.reset_interval);
  c.lambda_re = cfg.get_double(p + "lambda_re", c.lambda_re);
  c.lambda_e = cfg.get_double(p + "lambda_e", c.lambda_e);
  c.lambda_alpha = cfg.get_double(p + "lambda_alpha", c.lambda_alpha);
  c.lambda_theta = cfg.get_double(p + "lambda_theta", c.lambda_theta);
  c.lambda_v = cfg.get_double(p + "lambda_v", c.lambda_v);
  c.lambda_j = cfg.get_double(p + "lambda_j", c.lambda_j);
  c.validate();
  return c;
}

template <typename T>
io::ArrayStore PoseTokenizer<T>::to_store() const {
  io::ArrayStore store;
  params.for_each([&](const std::string& name, const Var<T>& p) {
    store.put_tensor("param/" + name, p.value());
  });
  store.put_tensor("codebook/entries", codebook.entries);
  store.put_tensor("codebook/ema_cluster_size", codebook.ema_cluster_size);
  store.put_tensor("codebook/ema_embed_sum", codebook.ema_embed_sum);
  std::vector<int> ages(codebook.usage_age.begin(), codebook.usage_age.end());
  store.put("codebook/usage_age", io::Array::from_ints(ages));
  store.metadata()["kind"] = "pose-tokenizer";
  store.metadata()["config"] = cfg.to_json();
  store.metadata()["config_hash"] = to_hex(cfg.hash());
  store.metadata()["num_tokens"] = cfg.num_tokens;
  store.metadata()["codebook_shape"] =
      std::vector<int>{cfg.codebook_size, cfg.code_dim};
  store.metadata()["train_step"] = train_step;
  store.metadata()["scalar"] = std::is_same_v<T, float> ? "f32" : "f64";
  return store;
}

template <typename T>
PoseTokenizer<T> PoseTokenizer<T>::from_store(const io::ArrayStore& store) {
  if (store.metadata().value("kind", "") != "pose-tokenizer")
    throw IntegrityError("checkpoint: not a pose tokenizer");
  const TokenizerConfig cfg =
      TokenizerConfig::from_json(store.metadata().at("config"));
  PoseTokenizer<T> tok(cfg, /*seed=*/0);
  tok.params.for_each([&](const std::string& name, Var<T>& p) {
    ad::Tensor<T> loaded = store.get("param/" + name).to_tensor<T>();
    if (loaded.shape() != p.value().shape())
      throw IntegrityError("checkpoint: shape mismatch for " + name);
    p.value() = std::move(loaded);
  });
  tok.codebook.entries = store.get("codebook/entries").to_tensor<T>();
  tok.codebook.ema_cluster_size =
      store.get("codebook/ema_cluster_size").to_tensor<T>();
  tok.codebook.ema_embed_sum = store.get("codebook/ema_embed_sum").to_tensor<T>();
  const std::vector<int> ages = store.get("codebook/usage_age").to_ints();
  tok.codebook.usage_age.assign(ages.begin(), ages.end());
  tok.sync_codebook_leaf();
  tok.train_step = store.metadata().value("train_step", std::int64_t(0));
  return tok;
}

template <typename T>
void PoseTokenizer<T>::save(const std::string& path) const {
  to_store().save_file(path);
}

template <typename T>
PoseTokenizer<T> PoseTokenizer<T>::load(const std::string& path) {
  return from_store(io::ArrayStore::load_file(path));
}

template <typename T>
TokenizerTrainStats train_tokenizer(
    PoseTokenizer<T>& tok, const Tensor<double>& poses,
    const hand::HandTemplate<T>& tpl, std::int64_t steps, int batch_size,
    double lr, std::uint64_t seed,
    const std::function<void(std::int64_t, const VqLossParts<T>&)>& on_step) {
  const int n = static_cast<int>(poses.rows());
  if (poses.cols() != hand::kThetaDim)
    throw InputError("train_tokenizer: poses must be (N, 48)");
  if (batch_size < 1 || batch_size > n)
    throw ConfigError("train_tokenizer: bad batch size");

  Tensor<T> all_theta = poses.template cast<T>();
  all_theta.reshape_inplace({n, hand::kThetaDim});

  // Ground-truth meshes are fixed; compute once (shared beta = 0).
  Tensor<T> gt_v, gt_j;
  {
    ad::NoGradGuard ng;
    Var<T> theta_c = Var<T>::constant(all_theta);
    Var<T> beta0 = Var<T>::constant(Tensor<T>({n, hand::kBetaDim}));
    auto fk = hand::fk_batched(theta_c, beta0, tpl);
    gt_v = fk.vertices.value();
    gt_j = fk.joints.value();
  }
  const int vv = tpl.vertex_count();

  nn::Adam<T> opt(lr);
  Rng batch_rng = Rng(seed).derive("batch");
  Rng reset_rng = Rng(seed).derive("codebook-reset");
  const int m = tok.cfg.num_tokens;
  const int d = tok.cfg.code_dim;

  TokenizerTrainStats stats;
  VqLossParts<T> parts;
  for (std::int64_t step = 0; step < steps; ++step) {
    const std::vector<int> batch =
        batch_rng.sample_without_replacement(n, batch_size);
    Tensor<T> theta_b({batch_size, hand::kThetaDim});
    Tensor<T> v_b({batch_size, vv, 3});
    Tensor<T> j_b({batch_size, hand::kNumRegressed, 3});
    for (int i = 0; i < batch_size; ++i) {
      const std::int64_t src = batch[static_cast<std::size_t>(i)];
      std::copy(all_theta.data() + src * hand::kThetaDim,
                all_theta.data() + (src + 1) * hand::kThetaDim,
                theta_b.data() + static_cast<std::int64_t>(i) * hand::kThetaDim);
      std::copy(gt_v.data() + src * vv * 3, gt_v.data() + (src + 1) * vv * 3,
                v_b.data() + static_cast<std::int64_t>(i) * vv * 3);
      std::copy(gt_j.data() + src * 21 * 3, gt_j.data() + (src + 1) * 21 * 3,
                j_b.data() + static_cast<std::int64_t>(i) * 21 * 3);
    }

    Var<T> theta_c = Var<T>::constant(theta_b);
    Var<T> z = tok.encode(theta_c);
    Var<T> z_flat = ad::reshape(z, {batch_size * m, d});
    auto [idx, zq] = quantize(z_flat.value(), tok.codebook.entries);
    Var<T> code_rows = ad::embedding(tok.codebook_entries, idx);
    Var<T> st = ad::reshape(straight_through(z_flat, zq), {batch_size, m, d});
    Var<T> theta_hat = tok.decode(st);

    Var<T> beta0 = Var<T>::constant(Tensor<T>({batch_size, hand::kBetaDim}));
    auto fk_hat = hand::fk_batched(theta_hat, beta0, tpl);

    parts = vq_loss(theta_c, theta_hat, z_flat, code_rows,
                    Var<T>::constant(v_b), fk_hat.vertices,
                    Var<T>::constant(j_b), fk_hat.joints, tok.cfg);
    if (!std::isfinite(static_cast<double>(parts.total.value()[0]))) {
      std::string dump = "train_tokenizer: non-finite loss at step " +
                         std::to_string(step) + "; batch indices:";
      for (const int b : batch) dump += " " + std::to_string(b);
      throw NumericError(dump);
    }

    tok.params.zero_grad();
    tok.codebook_entries.zero_grad();
    ad::backward(parts.total);
    opt.step(tok.params);
    ema_update(tok.codebook, z_flat.value(), idx, tok.cfg.ema_decay,
               tok.cfg.ema_eps, tok.cfg.reset_interval, reset_rng);
    tok.sync_codebook_leaf();
    ++tok.train_step;

    if (on_step) on_step(step, parts);
    if (step % 50 == 0)
      stats.loss_history.push_back(static_cast<double>(parts.total.value()[0]));
  }
  stats.steps = steps;
  stats.final_total = static_cast<double>(parts.total.value()[0]);
  stats.final_l_theta = static_cast<double>(parts.l_theta);
  return stats;
}

template class PoseTokenizer<float>;
template class PoseTokenizer<double>;
template TokenizerTrainStats train_tokenizer<float>(
    PoseTokenizer<float>&, const Tensor<double>&, const hand::HandTemplate<float>&,
    std::int64_t, int, double, std::uint64_t,
    const std::function<void(std::int64_t, const VqLossParts<float>&)>&);
template TokenizerTrainStats train_tokenizer<double>(
    PoseTokenizer<double>&, const Tensor<double>&,
    const hand::HandTemplate<double>&, std::int64_t, int, double, std::uint64_t,
    const std::function<void(std::int64_t, const VqLossParts<double>&)>&);

}  // namespace hmr::tokenizer
