/**
 * Copyright 2026 The xlkv Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "xlkv/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "xlkv/corpus.hpp"
#include "xlkv/errors.hpp"

namespace xlkv {

// --- similarity profiling ------------------------------------------------

nlohmann::json SimilarityReport::to_json() const {
  nlohmann::json p = nlohmann::json::array();
  for (const auto& s : pairs)
    p.push_back({{"layers", {s.layer, s.layer + 1}},
                 {"key", s.key},
                 {"value", s.value},
                 {"hidden", s.hidden},
                 {"latent", s.latent}});
  return {{"pairs", p},
          {"mean", {{"key", mean_key}, {"value", mean_value}, {"hidden", mean_hidden}, {"latent", mean_latent}}},
          {"hidden_self", hidden_self},
          {"corpus_hash", corpus_hash},
          {"tokens", tokens}};
}

SimilarityReport profile_similarity(const ModelWeights& w, const SharedFactorization& f,
                                    std::span<const Sequence> probe, const std::string& corpus_hash) {
  if (probe.empty()) throw InputError("probe corpus is empty");
  const auto& cfg = w.config;
  const RopeTable rope(cfg.d_head, cfg.max_seq, cfg.rope_theta);
  const std::size_t n_pairs = cfg.n_layers - 1;
  std::vector<double> key(n_pairs, 0.0), value(n_pairs, 0.0), hidden(n_pairs, 0.0), latent(n_pairs, 0.0);
  double self = 0.0;
  std::size_t tokens = 0;

  for (const auto& seq : probe) {
    std::vector<Mat> inputs(cfg.n_layers), latents(cfg.n_layers);
    KvCache cache(cfg);
    forward_baseline(w, rope, seq, ForwardMode::Prefill, cache, [&](std::size_t l, const Mat& x, const Mat& normed) {
      inputs[l] = x;
      latents[l] = compute_latent(normed, f.a_for_layer(l));
    });
    const auto n = static_cast<double>(seq.size());
    for (std::size_t l = 0; l < n_pairs; ++l) {
      key[l] += mean_row_cosine(cache.k[l], cache.k[l + 1]) * n;
      value[l] += mean_row_cosine(cache.v[l], cache.v[l + 1]) * n;
      hidden[l] += mean_row_cosine(inputs[l], inputs[l + 1]) * n;
      latent[l] += mean_row_cosine(latents[l], latents[l + 1]) * n;
    }
    for (std::size_t l = 0; l < cfg.n_layers; ++l) self += mean_row_cosine(inputs[l], inputs[l]) * n;
    tokens += seq.size();
  }

  SimilarityReport r;
  r.corpus_hash = corpus_hash;
  r.tokens = tokens;
  const auto T = static_cast<double>(tokens);
  for (std::size_t l = 0; l < n_pairs; ++l) {
    r.pairs.push_back({l, key[l] / T, value[l] / T, hidden[l] / T, latent[l] / T});
    r.mean_key += key[l] / T;
    r.mean_value += value[l] / T;
    r.mean_hidden += hidden[l] / T;
    r.mean_latent += latent[l] / T;
  }
  if (n_pairs > 0) {
    r.mean_key /= static_cast<double>(n_pairs);
    r.mean_value /= static_cast<double>(n_pairs);
    r.mean_hidden /= static_cast<double>(n_pairs);
    r.mean_latent /= static_cast<double>(n_pairs);
  }
  r.hidden_self = self / (T * static_cast<double>(cfg.n_layers));
  return r;
}

namespace {

Mat gaussian_mat(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(dist(rng) * scale);
  return m;
}

}  // namespace

SyntheticObservation synthetic_observation_trial(std::uint64_t seed, const SyntheticObservationParams& p) {
  std::mt19937_64 rng(seed);
  const auto d = static_cast<Eigen::Index>(p.d_hidden);
  const auto T = static_cast<Eigen::Index>(p.tokens);
  const double w_scale = 1.0 / std::sqrt(static_cast<double>(p.d_hidden));
  // Rows under min_cosine are redrawn.
  const double drift = 0.25;

  std::vector<Mat> hidden{gaussian_mat(rng, T, d, 1.0)};
  double min_cos = 1.0;
  for (std::size_t l = 1; l < p.n_layers; ++l) {
    const Mat& prev = hidden.back();
    Mat next(T, d);
    for (Eigen::Index t = 0; t < T; ++t) {
      for (;;) {
        const Mat noise = gaussian_mat(rng, 1, d, drift);
        next.row(t) = prev.row(t) + noise;
        const double c = cosine(prev.row(t), next.row(t));
        if (c >= p.min_cosine) {
          min_cos = std::min(min_cos, c);
          break;
        }
      }
    }
    hidden.push_back(std::move(next));
  }

  ModelWeights shell;
  shell.config.n_layers = p.n_layers;
  shell.config.d_hidden = p.d_hidden;
  std::vector<Mat> wk, wv;
  Mat wg(d, static_cast<Eigen::Index>(2 * p.n_layers * p.d_kv));
  const auto dkv = static_cast<Eigen::Index>(p.d_kv);
  for (std::size_t l = 0; l < p.n_layers; ++l) {
    wk.push_back(gaussian_mat(rng, d, dkv, w_scale));
    wv.push_back(gaussian_mat(rng, d, dkv, w_scale));
    wg.middleCols(static_cast<Eigen::Index>(2 * l) * dkv, dkv) = wk.back();
    wg.middleCols(static_cast<Eigen::Index>(2 * l + 1) * dkv, dkv) = wv.back();
  }
  const auto rank = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(p.rank_fraction * static_cast<double>(p.d_hidden))), 1,
      std::min<std::size_t>(p.d_hidden, 2 * p.n_layers * p.d_kv));
  const GroupFactors gf = factorize_group(wg, rank);

  SyntheticObservation obs;
  obs.min_adjacent_hidden_cosine = min_cos;
  for (std::size_t l = 0; l + 1 < p.n_layers; ++l) {
    obs.hidden += mean_row_cosine(hidden[l], hidden[l + 1]);
    obs.key += mean_row_cosine(matmul(hidden[l], wk[l]), matmul(hidden[l + 1], wk[l + 1]));
    obs.latent += mean_row_cosine(matmul(hidden[l], gf.a), matmul(hidden[l + 1], gf.a));
  }
  const auto pairs = static_cast<double>(p.n_layers - 1);
  obs.hidden /= pairs;
  obs.key /= pairs;
  obs.latent /= pairs;
  return obs;
}

// --- cache modes ---------------------------------------------------------

std::string to_string(CacheMode m) {
  switch (m) {
    case CacheMode::Baseline: return "baseline";
    case CacheMode::CommonKV: return "commonkv";
    case CacheMode::LowRankPerLayer: return "lowrank_perlayer";
    case CacheMode::RawKvMeanMerge: return "rawkv_meanmerge";
  }
  return "?";
}

CacheMode parse_cache_mode(const std::string& s) {
  if (s == "baseline") return CacheMode::Baseline;
  if (s == "commonkv") return CacheMode::CommonKV;
  if (s == "lowrank_perlayer") return CacheMode::LowRankPerLayer;
  if (s == "rawkv_meanmerge") return CacheMode::RawKvMeanMerge;
  throw ConfigError("unknown cache mode: " + s);
}

std::size_t lowrank_rank_for_ratio(const ModelConfig& cfg, double target_ratio) {
  if (!(target_ratio >= 0.0 && target_ratio < 1.0)) throw ConfigError("target ratio must lie in [0, 1)");
  const double width = static_cast<double>(2 * cfg.d_kv());
  const auto r = static_cast<std::size_t>(std::floor((1.0 - target_ratio) * width + 1e-9));
  return std::clamp<std::size_t>(r, 1, max_rank(cfg, 1));
}

namespace {

double row_nll(const Mat& logits, Eigen::Index row, TokenId target) {
  const auto r = logits.row(row).cast<double>();
  const double mx = r.maxCoeff();
  return mx + std::log((r.array() - mx).exp().sum()) - r(target);
}

// Raw K/V prefixes shared by mean within merged groups; per-layer decode suffixes.
class RawKvSession {
 public:
  RawKvSession(const ModelWeights& w, const RopeTable& rope, std::size_t group_size)
      : w_(w), rope_(rope), layout_(w.config.n_layers, group_size), cache_(w.config) {}

  Mat prefill(std::span<const TokenId> tokens) {
    Mat logits = forward_baseline(w_, rope_, tokens, ForwardMode::Prefill, cache_);
    const auto L = w_.config.n_layers;
    prefix_k_ = cache_.k;
    prefix_v_ = cache_.v;
    prefix_pos_ = cache_.positions;
    suffix_k_.assign(L, Mat(0, static_cast<Eigen::Index>(w_.config.d_kv())));
    suffix_v_ = suffix_k_;
    shared_of_.assign(L, -1);
    return logits;
  }

  std::vector<double> scores() const {
    std::vector<double> s;
    for (std::size_t g = 0; g < layout_.n_groups(); ++g) {
      Mat a(static_cast<Eigen::Index>(prefix_pos_.size()), static_cast<Eigen::Index>(2 * w_.config.d_kv()));
      Mat b(a.rows(), a.cols());
      a << prefix_k_[layout_.first_layer(g)], prefix_v_[layout_.first_layer(g)];
      b << prefix_k_[layout_.last_layer(g)], prefix_v_[layout_.last_layer(g)];
      s.push_back(mean_row_cosine(a, b));
    }
    return s;
  }

  void merge(std::span<const std::size_t> groups) {
    for (std::size_t g : groups) {
      MatD k = MatD::Zero(static_cast<Eigen::Index>(prefix_pos_.size()), static_cast<Eigen::Index>(w_.config.d_kv()));
      MatD v = k;
      for (std::size_t l = layout_.first_layer(g); l <= layout_.last_layer(g); ++l) {
        k += prefix_k_[l].cast<double>();
        v += prefix_v_[l].cast<double>();
      }
      const double inv = 1.0 / static_cast<double>(layout_.group_size());
      shared_k_.push_back((k * inv).cast<float>());
      shared_v_.push_back((v * inv).cast<float>());
      for (std::size_t l = layout_.first_layer(g); l <= layout_.last_layer(g); ++l) {
        shared_of_[l] = static_cast<int>(shared_k_.size() - 1);
        prefix_k_[l].resize(0, prefix_k_[l].cols());
        prefix_v_[l].resize(0, prefix_v_[l].cols());
      }
    }
  }

  Mat decode(TokenId token) {
    const int pos = static_cast<int>(prefix_pos_.size() + suffix_pos_.size());
    if (static_cast<std::size_t>(pos) >= w_.config.max_seq) throw CapacityError("decode beyond max_seq");
    suffix_pos_.push_back(pos);
    std::vector<int> key_pos = prefix_pos_;
    key_pos.insert(key_pos.end(), suffix_pos_.begin(), suffix_pos_.end());
    const int positions[1] = {pos};
    const TokenId tokens[1] = {token};
    auto attention = [&](std::size_t l, const Mat& normed, std::span<const int> p) {
      const auto& layer = w_.layers[l];
      Mat q = matmul(normed, layer.wq);
      Mat k = matmul(normed, layer.wk);
      apply_rope(q, p, rope_);
      apply_rope(k, p, rope_);
      append(suffix_k_[l], k);
      append(suffix_v_[l], matmul(normed, layer.wv));
      const Mat& pk = shared_of_[l] >= 0 ? shared_k_[static_cast<std::size_t>(shared_of_[l])] : prefix_k_[l];
      const Mat& pv = shared_of_[l] >= 0 ? shared_v_[static_cast<std::size_t>(shared_of_[l])] : prefix_v_[l];
      Mat kk(pk.rows() + suffix_k_[l].rows(), pk.cols()), vv(kk.rows(), kk.cols());
      kk << pk, suffix_k_[l];
      vv << pv, suffix_v_[l];
      return matmul(gqa_attention(w_.config, q, kk, vv, p, key_pos), layer.wo);
    };
    return run_decoder(w_, tokens, positions, attention);
  }

  std::size_t elements() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < prefix_k_.size(); ++l)
      n += static_cast<std::size_t>(prefix_k_[l].size() + prefix_v_[l].size() + suffix_k_[l].size() +
                                    suffix_v_[l].size());
    for (std::size_t i = 0; i < shared_k_.size(); ++i)
      n += static_cast<std::size_t>(shared_k_[i].size() + shared_v_[i].size());
    return n;
  }

  const GroupLayout& layout() const { return layout_; }

 private:
  static void append(Mat& m, const Mat& row) {
    Mat grown(m.rows() + row.rows(), m.cols());
    grown << m, row;
    m = std::move(grown);
  }

  const ModelWeights& w_;
  const RopeTable& rope_;
  GroupLayout layout_;
  KvCache cache_;
  std::vector<Mat> prefix_k_, prefix_v_, suffix_k_, suffix_v_, shared_k_, shared_v_;
  std::vector<int> shared_of_;
  std::vector<int> prefix_pos_, suffix_pos_;
};

}  // namespace

NllResult perplexity(const ModelWeights& w, const RopeTable& rope, std::span<const TokenId> text,
                     const EvalOptions& opt) {
  const auto& cfg = w.config;
  const std::size_t n = text.size();
  if (n < 2) throw InputError("perplexity needs at least two tokens");
  if (n > cfg.max_seq) throw CapacityError("text of " + std::to_string(n) + " tokens exceeds max_seq");

  NllResult res;
  res.prefill_tokens = std::clamp<std::size_t>(opt.prefill_tokens == 0 ? n / 2 : opt.prefill_tokens, 1, n - 1);
  res.decode_tokens = n - 1 - res.prefill_tokens;
  res.baseline_elements = baseline_kv_elements(cfg, res.prefill_tokens + res.decode_tokens);
  const auto P = res.prefill_tokens;
  const auto prompt = text.first(P);

  double total = 0.0;
  auto score_prefill = [&](const Mat& logits) {
    for (std::size_t t = 0; t < P; ++t) total += row_nll(logits, static_cast<Eigen::Index>(t), text[t + 1]);
  };
  auto score_decode = [&](const auto& step) {
    for (std::size_t t = P; t + 1 < n; ++t) total += row_nll(step(text[t]), 0, text[t + 1]);
  };

  switch (opt.mode) {
    case CacheMode::Baseline: {
      KvCache cache(cfg);
      score_prefill(forward_baseline(w, rope, prompt, ForwardMode::Prefill, cache));
      score_decode([&](TokenId tok) {
        const TokenId one[1] = {tok};
        return forward_baseline(w, rope, one, ForwardMode::Decode, cache);
      });
      res.cache_elements = cache.elements();
      res.predicted_elements = res.baseline_elements;
      break;
    }
    case CacheMode::CommonKV:
    case CacheMode::LowRankPerLayer: {
      SharedFactorization owned;
      const SharedFactorization* f = opt.factors;
      if (opt.mode == CacheMode::LowRankPerLayer) {
        f = opt.lowrank_factors;
        if (!f) {
          owned = transform_model_rank(w, 1, lowrank_rank_for_ratio(cfg, opt.target_ratio));
          f = &owned;
        }
        if (f->layout.group_size() != 1) throw ConfigError("lowrank_perlayer needs a group size of 1");
      }
      if (!f) throw ConfigError("commonkv mode needs a factorized model");
      LatentSession session(w, *f, rope);
      score_prefill(session.prefill(prompt));
      if (opt.mode == CacheMode::CommonKV) {
        res.plan = compress_session(session, opt.target_ratio, opt.strategy, opt.score, opt.fisher, res.decode_tokens);
        res.merged_groups = res.plan->merged.size();
      }
      score_decode([&](TokenId tok) { return session.decode(tok); });
      res.cache_elements = cache_bytes(session.store()).total();
      res.predicted_elements =
          predicted_latent_elements(f->layout, f->rank, res.merged_groups, P, res.decode_tokens).total();
      break;
    }
    case CacheMode::RawKvMeanMerge: {
      RawKvSession session(w, rope, opt.factors ? opt.factors->layout.group_size() : 4);
      score_prefill(session.prefill(prompt));
      const auto G = session.layout().n_groups();
      const auto k = static_cast<std::size_t>(std::llround(opt.target_ratio * static_cast<double>(G)));
      const auto scores = session.scores();
      const auto groups = top_k_groups(scores, std::min(k, G));
      session.merge(groups);
      res.merged_groups = groups.size();
      score_decode([&](TokenId tok) { return session.decode(tok); });
      res.cache_elements = session.elements();
      const auto m = session.layout().group_size();
      const auto row = 2 * cfg.d_kv();
      res.predicted_elements = (res.merged_groups * row + (G - res.merged_groups) * m * row) * P +
                               cfg.n_layers * row * res.decode_tokens;
      break;
    }
  }

  if (res.cache_elements != res.predicted_elements)
    throw NumericError("cache audit (" + std::to_string(res.cache_elements) + ") disagrees with prediction (" +
                       std::to_string(res.predicted_elements) + ")");
  res.achieved_ratio =
      1.0 - static_cast<double>(res.cache_elements) / static_cast<double>(res.baseline_elements);
  res.nll = total / static_cast<double>(n - 1);
  if (!std::isfinite(res.nll)) throw NumericError("non-finite NLL");
  return res;
}

// --- sweeps --------------------------------------------------------------

std::vector<BenchRecord> bench_sweep(const BenchInputs& in) {
  if (!in.weights) throw ConfigError("bench needs a model");
  struct Job {
    CacheMode mode;
    double ratio;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (auto mode : in.modes)
    for (double ratio : in.ratios)
      for (auto seed : in.seeds) jobs.push_back({mode, ratio, seed});

  const auto& cfg = in.weights->config;
  const RopeTable rope(cfg.d_head, cfg.max_seq, cfg.rope_theta);
  std::vector<BenchRecord> records(jobs.size());

  auto run_job = [&](std::size_t i) {
    const Job& job = jobs[i];
    BenchRecord rec;
    rec.mode = job.mode;
    rec.target_ratio = job.ratio;
    rec.seed = job.seed;
    const auto bytes = generate_markov_bytes(job.seed, in.text_tokens);
    const Sequence text = to_tokens(bytes);
    EvalOptions opt;
    opt.mode = job.mode;
    opt.target_ratio = job.ratio;
    opt.strategy = in.strategy;
    opt.score = in.score;
    opt.prefill_tokens = in.prefill_tokens;
    opt.factors = in.factors;
    opt.fisher = in.fisher;
    const auto start = std::chrono::steady_clock::now();
    try {
      const NllResult r = perplexity(*in.weights, rope, text, opt);
      rec.achieved_ratio = r.achieved_ratio;
      rec.nll = r.nll;
      rec.cache_elements = r.cache_elements;
      rec.merged_groups = r.merged_groups;
    } catch (const UnreachableRatioError& e) {
      rec.reachable = false;
      rec.achieved_ratio = std::nan("");
      rec.nll = std::nan("");
      std::ostringstream os;
      os << "unreachable; max ratio " << e.max_ratio;
      rec.note = os.str();
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    records[i] = std::move(rec);
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(in.workers, jobs.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) run_job(i);
    return records;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) {
        try {
          run_job(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  return records;
}

std::string bench_csv(std::span<const BenchRecord> records) {
  std::string out = "mode,target_ratio,achieved_ratio,nll,cache_elements,wall_ms,seed\n";
  char buf[256];
  for (const auto& r : records) {
    if (r.reachable)
      std::snprintf(buf, sizeof buf, "%s,%.4f,%.9f,%.9f,%zu,%.3f,%llu\n", to_string(r.mode).c_str(), r.target_ratio,
                    r.achieved_ratio, r.nll, r.cache_elements, r.wall_ms, static_cast<unsigned long long>(r.seed));
    else
      std::snprintf(buf, sizeof buf, "%s,%.4f,nan,nan,0,%.3f,%llu\n", to_string(r.mode).c_str(), r.target_ratio,
                    r.wall_ms, static_cast<unsigned long long>(r.seed));
    out += buf;
  }
  return out;
}

nlohmann::json bench_summary(const BenchInputs& in, std::span<const BenchRecord> records) {
  nlohmann::json modes = nlohmann::json::array();
  for (auto m : in.modes) modes.push_back(to_string(m));
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json j = {{"mode", to_string(r.mode)},
                        {"target_ratio", r.target_ratio},
                        {"seed", r.seed},
                        {"reachable", r.reachable},
                        {"cache_elements", r.cache_elements},
                        {"merged_groups", r.merged_groups}};
    if (r.reachable) {
      j["achieved_ratio"] = r.achieved_ratio;
      j["nll"] = r.nll;
    } else {
      j["note"] = r.note;
    }
    recs.push_back(std::move(j));
  }
  nlohmann::json config = {{"ratios", in.ratios},
                           {"modes", modes},
                           {"seeds", in.seeds},
                           {"strategy", to_string(in.strategy)},
                           {"score", to_string(in.score)},
                           {"text_tokens", in.text_tokens},
                           {"prefill_tokens", in.prefill_tokens}};
  if (in.weights) config["model"] = in.weights->config.to_json();
  if (in.factors) config["factorization"] = {{"rank", in.factors->rank}, {"group_size", in.factors->layout.group_size()}};
  if (in.fisher) config["fisher_corpus_hash"] = in.fisher->corpus_hash;
  return {{"config", config}, {"records", recs}};
}

// --- optimality diagnostics ----------------------------------------------

double random_factorization_error(const Mat& w, std::size_t rank, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  const Eigen::MatrixXd target = w.cast<double>();
  Eigen::MatrixXd a(target.rows(), static_cast<Eigen::Index>(rank));
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = dist(rng);
  const Eigen::MatrixXd b = a.colPivHouseholderQr().solve(target);
  return (a * b - target).norm();
}

double svd_factorization_error(const Mat& w, std::size_t rank) {
  const GroupFactors f = factorize_group(w, rank);
  return (f.a.cast<double>() * f.right.cast<double>() - w.cast<double>()).norm();
}

}  // namespace xlkv
