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
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "xlkv/budget.hpp"
#include "xlkv/check.hpp"
#include "xlkv/container.hpp"
#include "xlkv/corpus.hpp"
#include "xlkv/errors.hpp"
#include "xlkv/eval.hpp"
#include "xlkv/factorization.hpp"
#include "xlkv/model.hpp"

namespace fs = std::filesystem;
using namespace xlkv;

namespace {

struct RunConfig {
  std::string model;
  std::string out;
  std::string mode = "commonkv";
  double ratio = 0.5;
  std::size_t group_size = 4;
  double rank_fraction = 0.7;
  std::string merge = "fisher";
  std::string score = "shortcut";
  std::uint64_t seed = 0;
  std::string corpus;
  std::string fisher_file;
  std::size_t workers = 1;

  ModelConfig model_config;
  std::size_t sequences = 16;
  std::size_t seq_len = 64;
  std::size_t prefill = 0;
  std::size_t generate = 0;
  std::vector<double> ratios{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  std::vector<std::string> modes{"baseline", "commonkv", "lowrank_perlayer", "rawkv_meanmerge"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct LoadedModel {
  ModelWeights weights;
  std::optional<SharedFactorization> factors;
};

LoadedModel load_model(const RunConfig& rc) {
  if (rc.model.empty()) throw ConfigError("--model is required");
  const TensorContainer c = TensorContainer::load(rc.model);
  if (c.metadata.contains("factorization")) {
    FactorizedModel fm = read_factorized(c);
    return {std::move(fm.weights), std::move(fm.factors)};
  }
  return {read_weights(c), std::nullopt};
}

const SharedFactorization& ensure_factors(LoadedModel& m, const RunConfig& rc) {
  if (!m.factors) m.factors = transform_model(m.weights, rc.group_size, rc.rank_fraction);
  return *m.factors;
}

struct CorpusData {
  std::vector<std::uint8_t> bytes;
  std::vector<Sequence> sequences;
  std::string hash;
};

CorpusData load_corpus(const RunConfig& rc, std::size_t count, std::size_t len) {
  CorpusData d;
  if (!rc.corpus.empty())
    d.bytes = read_file_bytes(rc.corpus);
  else
    d.bytes = generate_markov_bytes(rc.seed, count * len);
  d.sequences = split_sequences(d.bytes, len, count);
  if (d.sequences.empty()) throw InputError("corpus holds no sequence of " + std::to_string(len) + " bytes");
  d.hash = corpus_hash(d.bytes);
  return d;
}

void emit(const RunConfig& rc, const nlohmann::json& j, const std::string& fallback = "") {
  const std::string text = j.dump(2) + "\n";
  const std::string path = rc.out.empty() ? fallback : rc.out;
  if (path.empty())
    std::cout << text;
  else
    write_text_file(path, text);
}

int cmd_gen_toy(const RunConfig& rc) {
  if (rc.out.empty()) throw ConfigError("--out is required");
  rc.model_config.validate();
  const ModelWeights w = gen_toy_model(rc.model_config, rc.seed);
  TensorContainer c;
  write_weights(c, w);
  c.metadata["seed"] = rc.seed;
  const auto bytes = c.serialize();
  write_file_bytes(rc.out, bytes);
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : c.tensors()) tensors.push_back({{"name", t.name}, {"shape", t.shape}});
  const nlohmann::json manifest = {{"model", rc.model_config.to_json()},
                                   {"seed", rc.seed},
                                   {"file", fs::path(rc.out).filename().string()},
                                   {"bytes", bytes.size()},
                                   {"fnv1a", fnv1a_hex(bytes)},
                                   {"tensors", tensors}};
  write_text_file(rc.out + ".manifest.json", manifest.dump(2) + "\n");
  return 0;
}

int cmd_transform(const RunConfig& rc) {
  if (rc.out.empty()) throw ConfigError("--out is required");
  LoadedModel m = load_model(rc);
  const SharedFactorization f = transform_model(m.weights, rc.group_size, rc.rank_fraction);
  TensorContainer c = factorized_container(m.weights, f);
  c.metadata["seed"] = rc.seed;
  c.save(rc.out);
  nlohmann::json report = reconstruction_report(f);
  report["seed"] = rc.seed;
  write_text_file(rc.out + ".report.json", report.dump(2) + "\n");
  return 0;
}

int cmd_fisher(const RunConfig& rc) {
  if (rc.out.empty()) throw ConfigError("--out is required");
  LoadedModel m = load_model(rc);
  const CorpusData corpus = load_corpus(rc, rc.sequences, rc.seq_len);
  estimate_fisher(m.weights, corpus.sequences, rc.seed, corpus.hash).save(rc.out);
  return 0;
}

int cmd_profile(const RunConfig& rc) {
  LoadedModel m = load_model(rc);
  const SharedFactorization& f = ensure_factors(m, rc);
  const CorpusData corpus = load_corpus(rc, rc.sequences, rc.seq_len);
  nlohmann::json j = profile_similarity(m.weights, f, corpus.sequences, corpus.hash).to_json();
  j["seed"] = rc.seed;
  emit(rc, j);
  return 0;
}

EvalOptions eval_options(const RunConfig& rc, const SharedFactorization* f, const FisherWeights* fisher) {
  EvalOptions opt;
  opt.mode = parse_cache_mode(rc.mode);
  opt.target_ratio = rc.ratio;
  opt.strategy = parse_merge_strategy(rc.merge);
  opt.score = parse_score_variant(rc.score);
  opt.prefill_tokens = rc.prefill;
  opt.factors = f;
  opt.fisher = fisher;
  return opt;
}

std::optional<FisherWeights> load_fisher(const RunConfig& rc) {
  if (rc.fisher_file.empty()) return std::nullopt;
  return FisherWeights::load(rc.fisher_file);
}

int cmd_run(const RunConfig& rc, bool merge_given) {
  const CacheMode mode = parse_cache_mode(rc.mode);
  if (merge_given && mode != CacheMode::CommonKV) throw ConfigError("--merge applies to commonkv mode only");
  LoadedModel m = load_model(rc);
  const auto& cfg = m.weights.config;
  const RopeTable rope(cfg.d_head, cfg.max_seq, cfg.rope_theta);
  const SharedFactorization* f = mode == CacheMode::Baseline ? nullptr : &ensure_factors(m, rc);
  const auto fisher = load_fisher(rc);
  if (mode == CacheMode::CommonKV && parse_merge_strategy(rc.merge) == MergeStrategy::Fisher && !fisher)
    throw ConfigError("fisher merging needs --fisher-file");

  const CorpusData corpus = load_corpus(rc, 1, rc.seq_len);
  const Sequence& text = corpus.sequences.front();
  const NllResult r = perplexity(m.weights, rope, text, eval_options(rc, f, fisher ? &*fisher : nullptr));
  nlohmann::json j = {{"mode", rc.mode},
                      {"target_ratio", rc.ratio},
                      {"achieved_ratio", r.achieved_ratio},
                      {"nll", r.nll},
                      {"perplexity", std::exp(r.nll)},
                      {"prefill_tokens", r.prefill_tokens},
                      {"decode_tokens", r.decode_tokens},
                      {"cache_elements", r.cache_elements},
                      {"baseline_elements", r.baseline_elements},
                      {"merged_groups", r.merged_groups},
                      {"corpus_hash", corpus.hash},
                      {"seed", rc.seed}};
  if (r.plan) j["plan"] = r.plan->to_json();

  if (rc.generate > 0) {
    // Greedy continuation of the prompt under the same cache mode.
    const auto prompt = std::span<const TokenId>(text).first(r.prefill_tokens);
    std::vector<TokenId> out;
    auto greedy = [](const Mat& logits) {
      Eigen::Index best = 0;
      logits.row(logits.rows() - 1).maxCoeff(&best);
      return static_cast<TokenId>(best);
    };
    const std::size_t steps = std::min(rc.generate, cfg.max_seq - prompt.size());
    if (mode == CacheMode::Baseline) {
      KvCache cache(cfg);
      TokenId next = greedy(forward_baseline(m.weights, rope, prompt, ForwardMode::Prefill, cache));
      for (std::size_t i = 0; i < steps; ++i) {
        out.push_back(next);
        const TokenId one[1] = {next};
        next = greedy(forward_baseline(m.weights, rope, one, ForwardMode::Decode, cache));
      }
    } else if (mode == CacheMode::CommonKV) {
      LatentSession s(m.weights, *f, rope);
      TokenId next = greedy(s.prefill(prompt));
      compress_session(s, rc.ratio, parse_merge_strategy(rc.merge), parse_score_variant(rc.score),
                       fisher ? &*fisher : nullptr, steps);
      for (std::size_t i = 0; i < steps; ++i) {
        out.push_back(next);
        next = greedy(s.decode(next));
      }
    } else {
      throw ConfigError("--generate supports baseline and commonkv modes");
    }
    j["generated_tokens"] = out;
  }
  emit(rc, j);
  return 0;
}

int cmd_bench(const RunConfig& rc) {
  LoadedModel m = load_model(rc);
  const SharedFactorization& f = ensure_factors(m, rc);
  const auto fisher = load_fisher(rc);
  BenchInputs in;
  in.weights = &m.weights;
  in.factors = &f;
  in.fisher = fisher ? &*fisher : nullptr;
  in.strategy = parse_merge_strategy(rc.merge);
  if (in.strategy == MergeStrategy::Fisher && !fisher) throw ConfigError("fisher merging needs --fisher-file");
  in.score = parse_score_variant(rc.score);
  in.ratios = rc.ratios;
  for (const auto& s : rc.modes) in.modes.push_back(parse_cache_mode(s));
  in.seeds = rc.seeds;
  in.text_tokens = rc.seq_len;
  in.prefill_tokens = rc.prefill == 0 ? rc.seq_len * 3 / 4 : rc.prefill;
  in.workers = rc.workers;
  const auto records = bench_sweep(in);
  const std::string prefix = rc.out.empty() ? "bench" : rc.out;
  write_text_file(prefix + ".csv", bench_csv(records));
  nlohmann::json summary = bench_summary(in, records);
  summary["seed"] = rc.seed;
  write_text_file(prefix + ".summary.json", summary.dump(2) + "\n");
  return 0;
}

int cmd_check(const RunConfig& rc) {
  const nlohmann::json report = run_self_check(rc.seed);
  emit(rc, report);
  return report.at("passed").get<bool>() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-layer latent KV cache toolkit"};
  app.set_config("--config", "", "TOML/INI config file; command-line flags take precedence");
  app.require_subcommand(1);
  RunConfig rc;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--model", rc.model, "Model or factorized container");
    sub->add_option("--out", rc.out, "Output path");
    sub->add_option("--seed", rc.seed, "Root seed")->capture_default_str();
  };
  auto add_factor = [&](CLI::App* sub) {
    sub->add_option("--group-size", rc.group_size, "Layers per shared factor")->capture_default_str();
    sub->add_option("--rank-fraction", rc.rank_fraction, "SVD rank as a fraction of d_hidden")->capture_default_str();
  };
  auto add_corpus = [&](CLI::App* sub) {
    sub->add_option("--corpus", rc.corpus, "Byte corpus file; a seeded Markov chain when omitted");
    sub->add_option("--sequences", rc.sequences, "Number of sequences")->capture_default_str();
    sub->add_option("--seq-len", rc.seq_len, "Tokens per sequence")->capture_default_str();
  };
  auto add_eval = [&](CLI::App* sub) -> CLI::Option* {
    sub->add_option("--score", rc.score, "Group score: shortcut or full")->capture_default_str();
    sub->add_option("--fisher-file", rc.fisher_file, "Fisher weights from the fisher command");
    sub->add_option("--prefill", rc.prefill, "Prompt tokens; the rest are decoded one by one");
    return sub->add_option("--merge", rc.merge, "mean, fisher, shallow or deep")->capture_default_str();
  };

  auto* gen = app.add_subcommand("gen-toy", "Write a seeded random model and its manifest");
  add_common(gen);
  auto& mc = rc.model_config;
  gen->add_option("--layers", mc.n_layers)->capture_default_str();
  gen->add_option("--d-hidden", mc.d_hidden)->capture_default_str();
  gen->add_option("--q-heads", mc.n_q_heads)->capture_default_str();
  gen->add_option("--kv-heads", mc.n_kv_heads)->capture_default_str();
  gen->add_option("--d-head", mc.d_head)->capture_default_str();
  gen->add_option("--d-mlp", mc.d_mlp)->capture_default_str();
  gen->add_option("--max-seq", mc.max_seq)->capture_default_str();
  gen->add_option("--rope-theta", mc.rope_theta)->capture_default_str();

  auto* transform = app.add_subcommand("transform", "Factorize K/V projections per layer group");
  add_common(transform);
  add_factor(transform);

  auto* fisher = app.add_subcommand("fisher", "Estimate per-layer Fisher weights");
  add_common(fisher);
  add_corpus(fisher);

  auto* profile = app.add_subcommand("profile", "Adjacent-layer similarity of K, V, hidden states and latents");
  add_common(profile);
  add_factor(profile);
  add_corpus(profile);

  auto* run = app.add_subcommand("run", "Teacher-forced NLL of one text under a cache mode");
  add_common(run);
  add_factor(run);
  add_corpus(run);
  run->add_option("--mode", rc.mode, "baseline, commonkv, lowrank_perlayer or rawkv_meanmerge")->capture_default_str();
  run->add_option("--ratio", rc.ratio, "Target compression ratio")->capture_default_str();
  run->add_option("--generate", rc.generate, "Greedy tokens to generate after the prompt");
  CLI::Option* run_merge = add_eval(run);

  auto* bench = app.add_subcommand("bench", "Sweep modes, ratios and seeds into CSV and JSON");
  add_common(bench);
  add_factor(bench);
  add_eval(bench);
  bench->add_option("--seq-len", rc.seq_len, "Tokens per text")->capture_default_str();
  bench->add_option("--ratios", rc.ratios, "Target ratios")->capture_default_str();
  bench->add_option("--modes", rc.modes, "Cache modes")->capture_default_str();
  bench->add_option("--seeds", rc.seeds, "Text seeds")->capture_default_str();
  bench->add_option("--workers", rc.workers, "Worker threads")->capture_default_str();

  auto* check = app.add_subcommand("check", "Run the invariant suite");
  add_common(check);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code(ErrorKind::Config);
  }

  try {
    if (*gen) return cmd_gen_toy(rc);
    if (*transform) return cmd_transform(rc);
    if (*fisher) return cmd_fisher(rc);
    if (*profile) return cmd_profile(rc);
    if (*run) return cmd_run(rc, run_merge->count() > 0);
    if (*bench) return cmd_bench(rc);
    if (*check) return cmd_check(rc);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
