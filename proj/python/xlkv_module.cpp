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
#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "xlkv/budget.hpp"
#include "xlkv/check.hpp"
#include "xlkv/errors.hpp"
#include "xlkv/eval.hpp"
#include "xlkv/factorization.hpp"
#include "xlkv/latent_cache.hpp"
#include "xlkv/model.hpp"

namespace py = pybind11;
using namespace xlkv;

namespace {

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

struct Engine {
  ModelWeights weights;
  std::optional<SharedFactorization> factors;
  RopeTable rope;

  explicit Engine(ModelWeights w)
      : weights(std::move(w)), rope(weights.config.d_head, weights.config.max_seq, weights.config.rope_theta) {}
};

Engine load_engine(const std::string& path) {
  const TensorContainer c = TensorContainer::load(path);
  if (c.metadata.contains("factorization")) {
    FactorizedModel fm = read_factorized(c);
    Engine e(std::move(fm.weights));
    e.factors = std::move(fm.factors);
    return e;
  }
  return Engine(read_weights(c));
}

}  // namespace

PYBIND11_MODULE(_xlkv, m) {
  m.doc() = "Cross-layer latent KV cache engine";

  static py::exception<Error> base(m, "XlkvError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(base, e.what());
    }
  });

  m.def("factorize_group", [](const Mat& wg, std::size_t rank) {
    GroupFactors f = factorize_group(wg, rank);
    return py::make_tuple(f.a, f.right, f.singular_values);
  }, py::arg("wg"), py::arg("rank"));
  m.def("svd_factorization_error", &svd_factorization_error);
  m.def("max_ratio", [](std::size_t n_layers, std::size_t group_size, std::size_t d_kv, std::size_t rank) {
    return BudgetGeometry{n_layers, group_size, d_kv, rank}.max_ratio();
  });
  m.def("allocate_budget", [](std::vector<double> scores, double target, std::size_t n_layers, std::size_t group_size,
                              std::size_t d_kv, std::size_t rank) {
    return to_py(allocate_budget(scores, target, BudgetGeometry{n_layers, group_size, d_kv, rank}).to_json());
  });
  m.def("merge_group", [](std::vector<Mat> prefixes, const std::string& strategy, std::vector<double> fisher) {
    return merge_group(prefixes, parse_merge_strategy(strategy), fisher).merged;
  }, py::arg("prefixes"), py::arg("strategy") = "mean", py::arg("fisher") = std::vector<double>{});
  m.def("self_check", [](std::uint64_t seed) { return to_py(run_self_check(seed)); }, py::arg("seed") = 0);

  py::class_<Engine>(m, "Engine")
      .def(py::init([](std::uint64_t seed) { return Engine(gen_toy_model(ModelConfig::toy(), seed)); }),
           py::arg("seed") = 0)
      .def_static("load", &load_engine)
      .def("save", [](const Engine& e, const std::string& path) {
        TensorContainer c = e.factors ? factorized_container(e.weights, *e.factors) : TensorContainer{};
        if (!e.factors) write_weights(c, e.weights);
        c.save(path);
      })
      .def("transform", [](Engine& e, std::size_t group_size, double rank_fraction) {
        e.factors = transform_model(e.weights, group_size, rank_fraction);
        return to_py(reconstruction_report(*e.factors));
      }, py::arg("group_size") = 4, py::arg("rank_fraction") = 0.7)
      .def_property_readonly("config", [](const Engine& e) { return to_py(e.weights.config.to_json()); })
      .def("logits", [](const Engine& e, const std::vector<TokenId>& tokens) {
        KvCache cache(e.weights.config);
        return forward_baseline(e.weights, e.rope, tokens, ForwardMode::Prefill, cache);
      })
      .def("latent_logits", [](const Engine& e, const std::vector<TokenId>& tokens) {
        if (!e.factors) throw ConfigError("call transform() first");
        LatentSession s(e.weights, *e.factors, e.rope);
        return s.prefill(tokens);
      })
      .def("perplexity", [](const Engine& e, const std::vector<TokenId>& text, const std::string& mode, double ratio,
                            const std::string& merge, std::size_t prefill) {
        EvalOptions opt;
        opt.mode = parse_cache_mode(mode);
        opt.target_ratio = ratio;
        opt.strategy = parse_merge_strategy(merge);
        opt.prefill_tokens = prefill;
        opt.factors = e.factors ? &*e.factors : nullptr;
        const NllResult r = perplexity(e.weights, e.rope, text, opt);
        py::dict d;
        d["nll"] = r.nll;
        d["achieved_ratio"] = r.achieved_ratio;
        d["cache_elements"] = r.cache_elements;
        d["baseline_elements"] = r.baseline_elements;
        d["merged_groups"] = r.merged_groups;
        return d;
      }, py::arg("text"), py::arg("mode") = "baseline", py::arg("ratio") = 0.0, py::arg("merge") = "mean",
         py::arg("prefill") = 0);
}
