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
#include "xlkv/budget.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "xlkv/errors.hpp"

namespace xlkv {

std::string to_string(MergeStrategy s) {
  switch (s) {
    case MergeStrategy::Mean: return "mean";
    case MergeStrategy::Fisher: return "fisher";
    case MergeStrategy::Shallow: return "shallow";
    case MergeStrategy::Deep: return "deep";
  }
  return "?";
}

std::string to_string(ScoreVariant s) { return s == ScoreVariant::Shortcut ? "shortcut" : "full"; }

MergeStrategy parse_merge_strategy(const std::string& s) {
  if (s == "mean") return MergeStrategy::Mean;
  if (s == "fisher") return MergeStrategy::Fisher;
  if (s == "shallow") return MergeStrategy::Shallow;
  if (s == "deep") return MergeStrategy::Deep;
  throw ConfigError("unknown merge strategy: " + s);
}

ScoreVariant parse_score_variant(const std::string& s) {
  if (s == "shortcut") return ScoreVariant::Shortcut;
  if (s == "full") return ScoreVariant::Full;
  throw ConfigError("unknown score variant: " + s);
}

double group_score(const Mat& first, const Mat& last) {
  if (first.rows() == 0) throw InputError("group_score: empty prefix");
  if (first.rows() != last.rows() || first.cols() != last.cols())
    throw InputError("group_score: prefixes differ in shape");
  return mean_row_cosine(first, last);
}

double group_score_full(std::span<const Mat> prefixes) {
  if (prefixes.empty() || prefixes.front().rows() == 0) throw InputError("group_score_full: empty prefix");
  if (prefixes.size() == 1) return 1.0;
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < prefixes.size(); ++i) acc += group_score(prefixes[i], prefixes[i + 1]);
  return acc / static_cast<double>(prefixes.size() - 1);
}

std::vector<double> score_groups(const LatentCacheStore& store, ScoreVariant variant) {
  const auto& layout = store.layout();
  std::vector<double> scores;
  for (std::size_t g = 0; g < layout.n_groups(); ++g) {
    if (store.is_merged(g)) throw InputError("cannot score an already merged group");
    if (variant == ScoreVariant::Shortcut) {
      scores.push_back(group_score(store.prefix(layout.first_layer(g)), store.prefix(layout.last_layer(g))));
    } else {
      std::vector<Mat> members;
      for (std::size_t l = layout.first_layer(g); l <= layout.last_layer(g); ++l) members.push_back(store.prefix(l));
      scores.push_back(group_score_full(members));
    }
  }
  return scores;
}

std::size_t BudgetGeometry::prefill_cost(std::size_t merged) const {
  return merged * rank + (n_groups() - merged) * group_size * rank;
}

double BudgetGeometry::ratio(std::size_t merged) const {
  if (prefill_tokens + decode_tokens == 0) throw ConfigError("budget geometry needs at least one token");
  const double original = static_cast<double>(n_layers * 2 * d_kv) * static_cast<double>(prefill_tokens + decode_tokens);
  const double compressed = static_cast<double>(prefill_cost(merged)) * static_cast<double>(prefill_tokens) +
                            static_cast<double>(n_layers * rank) * static_cast<double>(decode_tokens);
  return 1.0 - compressed / original;
}

bool BudgetPlan::is_merged(std::size_t group) const {
  return std::find(merged.begin(), merged.end(), group) != merged.end();
}

nlohmann::json BudgetPlan::to_json() const {
  return {{"scores", scores},
          {"merged", merged},
          {"target_ratio", target_ratio},
          {"predicted_ratio", predicted_ratio},
          {"max_ratio", max_ratio},
          {"strategy", to_string(strategy)},
          {"merge_weights", merge_weights},
          {"warnings", warnings}};
}

std::vector<std::size_t> top_k_groups(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(std::min(k, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

BudgetPlan allocate_budget(std::span<const double> scores, double target_ratio, const BudgetGeometry& geometry,
                           MergeStrategy strategy) {
  if (geometry.group_size == 0 || geometry.n_layers % geometry.group_size != 0)
    throw ConfigError("budget geometry: layers must divide into groups");
  if (geometry.rank == 0 || geometry.d_kv == 0) throw ConfigError("budget geometry: rank and d_kv must be positive");
  if (scores.size() != geometry.n_groups()) throw InputError("one score per group required");
  if (!(target_ratio >= 0.0 && target_ratio < 1.0)) throw ConfigError("target ratio must lie in [0, 1)");
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericError("non-finite group score");

  BudgetPlan plan;
  plan.scores.assign(scores.begin(), scores.end());
  plan.target_ratio = target_ratio;
  plan.strategy = strategy;
  plan.max_ratio = geometry.max_ratio();

  std::optional<std::size_t> chosen;
  for (std::size_t k = 0; k <= geometry.n_groups(); ++k) {
    if (geometry.ratio(k) >= target_ratio) {
      chosen = k;
      break;
    }
  }
  if (!chosen) {
    std::ostringstream os;
    os << "target ratio " << target_ratio << " unreachable; maximum achievable ratio is " << plan.max_ratio;
    throw UnreachableRatioError(os.str(), plan.max_ratio);
  }
  plan.merged = top_k_groups(scores, *chosen);
  plan.predicted_ratio = geometry.ratio(*chosen);
  plan.predicted_elements_per_prefill_token = geometry.prefill_cost(*chosen);
  return plan;
}

nlohmann::json FisherWeights::to_json() const {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < k.size(); ++l) layers.push_back({{"layer", l}, {"k", k[l]}, {"v", v[l]}, {"total", layer(l)}});
  return {{"corpus_hash", corpus_hash}, {"seed", seed}, {"n_sequences", n_sequences}, {"layers", layers}};
}

FisherWeights FisherWeights::from_json(const nlohmann::json& j) {
  FisherWeights f;
  try {
    f.corpus_hash = j.at("corpus_hash").get<std::string>();
    f.seed = j.at("seed").get<std::uint64_t>();
    f.n_sequences = j.at("n_sequences").get<std::size_t>();
    for (const auto& l : j.at("layers")) {
      f.k.push_back(l.at("k").get<double>());
      f.v.push_back(l.at("v").get<double>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed fisher file: ") + e.what());
  }
  for (std::size_t l = 0; l < f.k.size(); ++l)
    if (!(f.k[l] >= 0.0 && f.v[l] >= 0.0) || !std::isfinite(f.layer(l)))
      throw NumericError("fisher weights must be finite and nonnegative");
  return f;
}

void FisherWeights::save(const std::filesystem::path& path) const { write_text_file(path, to_json().dump(2) + "\n"); }

FisherWeights FisherWeights::load(const std::filesystem::path& path) {
  try {
    return from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("cannot parse fisher file: ") + e.what());
  }
}

FisherWeights estimate_fisher(const ModelWeights& w, std::span<const Sequence> corpus, std::uint64_t seed,
                              const std::string& corpus_hash) {
  if (corpus.empty()) throw InputError("calibration corpus is empty");
  const ModelWeightsF64 wd = w.cast<double>();
  FisherWeights f;
  f.k.assign(w.config.n_layers, 0.0);
  f.v.assign(w.config.n_layers, 0.0);
  f.seed = seed;
  f.corpus_hash = corpus_hash;
  f.n_sequences = corpus.size();
  for (const auto& seq : corpus) {
    const auto g = loss_and_grads(wd, std::span<const Sequence>(&seq, 1));
    for (std::size_t l = 0; l < f.k.size(); ++l) {
      f.k[l] += g.d_wk[l].squaredNorm();
      f.v[l] += g.d_wv[l].squaredNorm();
    }
  }
  for (std::size_t l = 0; l < f.k.size(); ++l) {
    f.k[l] /= static_cast<double>(corpus.size());
    f.v[l] /= static_cast<double>(corpus.size());
  }
  return f;
}

MergeResult merge_group(std::span<const Mat> prefixes, MergeStrategy strategy, std::span<const double> layer_fisher) {
  if (prefixes.empty()) throw InputError("merge_group: no prefixes");
  for (const auto& p : prefixes)
    if (p.rows() != prefixes[0].rows() || p.cols() != prefixes[0].cols())
      throw InputError("merge_group: prefixes differ in shape");

  const std::size_t m = prefixes.size();
  MergeResult out;
  out.weights.assign(m, 0.0);
  switch (strategy) {
    case MergeStrategy::Shallow: out.weights.front() = 1.0; break;
    case MergeStrategy::Deep: out.weights.back() = 1.0; break;
    case MergeStrategy::Mean: out.weights.assign(m, 1.0 / static_cast<double>(m)); break;
    case MergeStrategy::Fisher: {
      if (layer_fisher.size() != m) throw InputError("merge_group: one Fisher weight per layer required");
      double total = 0.0;
      for (double f : layer_fisher) {
        if (!(f >= 0.0) || !std::isfinite(f)) throw NumericError("fisher weights must be finite and nonnegative");
        total += f;
      }
      if (total > 0.0) {
        for (std::size_t i = 0; i < m; ++i) out.weights[i] = layer_fisher[i] / total;
      } else {
        out.weights.assign(m, 1.0 / static_cast<double>(m));
        out.fell_back_to_mean = true;
      }
      break;
    }
  }

  MatD acc = MatD::Zero(prefixes[0].rows(), prefixes[0].cols());
  for (std::size_t i = 0; i < m; ++i)
    if (out.weights[i] != 0.0) acc += prefixes[i].cast<double>() * out.weights[i];
  out.merged = acc.cast<float>();
  return out;
}

void apply_plan(LatentCacheStore& store, BudgetPlan& plan, const FisherWeights* fisher) {
  const auto& layout = store.layout();
  if (plan.strategy == MergeStrategy::Fisher && !fisher) throw ConfigError("fisher merging needs Fisher weights");
  if (fisher && fisher->k.size() != layout.n_layers()) throw ConfigError("Fisher weights do not match layer count");
  plan.merge_weights.clear();
  for (std::size_t g : plan.merged) {
    std::vector<Mat> members;
    std::vector<double> f;
    for (std::size_t l = layout.first_layer(g); l <= layout.last_layer(g); ++l) {
      members.push_back(store.prefix(l));
      if (fisher) f.push_back(fisher->layer(l));
    }
    MergeResult r = merge_group(members, plan.strategy, f);
    if (r.fell_back_to_mean)
      plan.warnings.push_back("group " + std::to_string(g) + ": all-zero Fisher weights, merged by mean");
    plan.merge_weights.push_back(r.weights);
    store.merge_group(g, std::move(r.merged), std::move(r.weights));
  }
}

BudgetPlan compress_session(LatentSession& session, double target_ratio, MergeStrategy strategy, ScoreVariant variant,
                            const FisherWeights* fisher, std::size_t expected_decode_tokens) {
  auto& store = session.store();
  if (!store.prefill_done()) throw InputError("compress_session requires a completed prefill");
  const auto& cfg = session.weights().config;
  BudgetGeometry geom{cfg.n_layers, store.layout().group_size(), cfg.d_kv(), store.rank(),
                      store.prefill_length(), expected_decode_tokens};
  BudgetPlan plan = allocate_budget(score_groups(store, variant), target_ratio, geom, strategy);
  apply_plan(store, plan, fisher);
  return plan;
}

}  // namespace xlkv
