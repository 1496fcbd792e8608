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
// f64 teacher-forced forward pass with a hand-written reverse pass. Only the
// W_k / W_v gradients are accumulated, but the pass goes through every block
// so those gradients are exact.
#include <cmath>
#include <limits>
#include <numeric>

#include "xlkv/errors.hpp"
#include "xlkv/model.hpp"

namespace xlkv {

namespace {

struct NormState {
  MatD y;
  VecD inv_rms;
};

NormState norm_fwd(const MatD& x, const VecD& gain) {
  NormState s{MatD(x.rows(), x.cols()), VecD(x.rows())};
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    s.inv_rms(t) = 1.0 / std::sqrt(x.row(t).squaredNorm() / static_cast<double>(x.cols()) + kRmsEps);
    s.y.row(t) = x.row(t).cwiseProduct(gain.transpose()) * s.inv_rms(t);
  }
  return s;
}

MatD norm_bwd(const MatD& x, const VecD& inv_rms, const VecD& gain, const MatD& dy) {
  MatD dx(x.rows(), x.cols());
  const double d = static_cast<double>(x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const Eigen::RowVectorXd gy = dy.row(t).cwiseProduct(gain.transpose());
    const double r = inv_rms(t);
    dx.row(t) = gy * r - x.row(t) * (r * r * r * gy.dot(x.row(t)) / d);
  }
  return dx;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

MatD causal_softmax(const MatD& s) {
  MatD p = MatD::Zero(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).head(i + 1).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j <= i; ++j) sum += (p(i, j) = std::exp(s(i, j) - mx));
    p.row(i).head(i + 1) /= sum;
  }
  return p;
}

struct LayerTrace {
  MatD x_in;
  NormState attn_norm;
  MatD q, k, v;  // q, k rotated
  std::vector<MatD> probs;
  MatD x_mid;
  NormState mlp_norm;
  MatD u;  // pre-activation
};

struct Trace {
  std::vector<LayerTrace> layers;
  MatD x_final;
  NormState final_norm;
  MatD logits;
};

Trace forward_trace(const ModelWeightsF64& w, const RopeTable& rope, std::span<const TokenId> tokens) {
  const auto& cfg = w.config;
  const auto T = static_cast<Eigen::Index>(tokens.size());
  const auto dh = static_cast<Eigen::Index>(cfg.d_head);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  std::vector<int> pos(tokens.size());
  std::iota(pos.begin(), pos.end(), 0);

  Trace tr;
  MatD x(T, static_cast<Eigen::Index>(cfg.d_hidden));
  for (Eigen::Index t = 0; t < T; ++t) {
    const auto id = tokens[static_cast<std::size_t>(t)];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) throw InputError("token outside vocabulary");
    x.row(t) = w.embed.row(id);
  }

  for (const auto& L : w.layers) {
    LayerTrace lt;
    lt.x_in = x;
    lt.attn_norm = norm_fwd(x, L.attn_norm);
    const MatD& a = lt.attn_norm.y;
    lt.q = a * L.wq;
    lt.k = a * L.wk;
    lt.v = a * L.wv;
    apply_rope(lt.q, pos, rope);
    apply_rope(lt.k, pos, rope);
    MatD o(T, static_cast<Eigen::Index>(cfg.d_hidden));
    for (std::size_t h = 0; h < cfg.n_q_heads; ++h) {
      const auto kv = static_cast<Eigen::Index>(cfg.kv_head_of(h));
      const auto hq = static_cast<Eigen::Index>(h);
      MatD p = causal_softmax(lt.q.middleCols(hq * dh, dh) * lt.k.middleCols(kv * dh, dh).transpose() * scale);
      o.middleCols(hq * dh, dh) = p * lt.v.middleCols(kv * dh, dh);
      lt.probs.push_back(std::move(p));
    }
    lt.x_mid = x + o * L.wo;
    lt.mlp_norm = norm_fwd(lt.x_mid, L.mlp_norm);
    lt.u = lt.mlp_norm.y * L.w_up;
    const MatD g = lt.u.unaryExpr([](double v) { return v * sigmoid(v); });
    x = lt.x_mid + g * L.w_down;
    tr.layers.push_back(std::move(lt));
  }
  tr.x_final = x;
  tr.final_norm = norm_fwd(x, w.final_norm);
  tr.logits = tr.final_norm.y * w.head;
  return tr;
}

// Returns the summed (not averaged) next-token NLL; fills dlogits scaled by 1/n_total.
double nll_and_dlogits(const MatD& logits, std::span<const TokenId> tokens, double inv_total, MatD* dlogits) {
  double total = 0.0;
  if (dlogits) *dlogits = MatD::Zero(logits.rows(), logits.cols());
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const auto r = static_cast<Eigen::Index>(t);
    const double mx = logits.row(r).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(r).array() - mx).exp().matrix();
    const double sum = e.sum();
    total += mx + std::log(sum) - logits(r, tokens[t + 1]);
    if (dlogits) {
      dlogits->row(r) = e / sum * inv_total;
      (*dlogits)(r, tokens[t + 1]) -= inv_total;
    }
  }
  return total;
}

void check_batch(std::span<const Sequence> batch, std::size_t max_seq) {
  if (batch.empty()) throw InputError("empty batch");
  for (const auto& s : batch) {
    if (s.size() < 2) throw InputError("sequence too short: next-token loss needs at least two tokens");
    if (s.size() > max_seq) throw CapacityError("sequence exceeds max_seq");
  }
}

std::size_t prediction_count(std::span<const Sequence> batch) {
  std::size_t n = 0;
  for (const auto& s : batch) n += s.size() - 1;
  return n;
}

}  // namespace

double teacher_forced_loss(const ModelWeightsF64& w, std::span<const Sequence> batch) {
  check_batch(batch, w.config.max_seq);
  const RopeTable rope(w.config.d_head, w.config.max_seq, w.config.rope_theta);
  double total = 0.0;
  for (const auto& seq : batch) total += nll_and_dlogits(forward_trace(w, rope, seq).logits, seq, 0.0, nullptr);
  return total / static_cast<double>(prediction_count(batch));
}

LossAndGrads loss_and_grads(const ModelWeightsF64& w, std::span<const Sequence> batch) {
  const auto& cfg = w.config;
  check_batch(batch, cfg.max_seq);
  const RopeTable rope(cfg.d_head, cfg.max_seq, cfg.rope_theta);
  const RopeTable unrope = rope.inverse();
  const auto dh = static_cast<Eigen::Index>(cfg.d_head);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  const double inv_total = 1.0 / static_cast<double>(prediction_count(batch));

  LossAndGrads out;
  for (const auto& L : w.layers) {
    out.d_wk.push_back(MatD::Zero(L.wk.rows(), L.wk.cols()));
    out.d_wv.push_back(MatD::Zero(L.wv.rows(), L.wv.cols()));
  }

  for (const auto& seq : batch) {
    const Trace tr = forward_trace(w, rope, seq);
    std::vector<int> pos(seq.size());
    std::iota(pos.begin(), pos.end(), 0);

    MatD dlogits;
    out.loss += nll_and_dlogits(tr.logits, seq, inv_total, &dlogits);
    MatD dx = norm_bwd(tr.x_final, tr.final_norm.inv_rms, w.final_norm, dlogits * w.head.transpose());

    for (std::size_t li = w.layers.size(); li-- > 0;) {
      const auto& L = w.layers[li];
      const auto& lt = tr.layers[li];

      // MLP block: x_out = x_mid + silu(norm(x_mid) W_up) W_down
      MatD du = dx * L.w_down.transpose();
      du = du.binaryExpr(lt.u, [](double g, double u) {
        const double s = sigmoid(u);
        return g * s * (1.0 + u * (1.0 - s));
      });
      MatD dx_mid = dx + norm_bwd(lt.x_mid, lt.mlp_norm.inv_rms, L.mlp_norm, du * L.w_up.transpose());

      // Attention block: x_mid = x_in + concat_h(P_h V_kv(h)) W_o
      const MatD d_o = dx_mid * L.wo.transpose();
      MatD dq = MatD::Zero(lt.q.rows(), lt.q.cols());
      MatD dk = MatD::Zero(lt.k.rows(), lt.k.cols());
      MatD dv = MatD::Zero(lt.v.rows(), lt.v.cols());
      for (std::size_t h = 0; h < cfg.n_q_heads; ++h) {
        const auto kv = static_cast<Eigen::Index>(cfg.kv_head_of(h));
        const auto hq = static_cast<Eigen::Index>(h);
        const MatD& p = lt.probs[h];
        const MatD d_oh = d_o.middleCols(hq * dh, dh);
        const MatD dp = d_oh * lt.v.middleCols(kv * dh, dh).transpose();
        dv.middleCols(kv * dh, dh) += p.transpose() * d_oh;
        const VecD row_dot = dp.cwiseProduct(p).rowwise().sum();
        const MatD ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * scale;
        dq.middleCols(hq * dh, dh) += ds * lt.k.middleCols(kv * dh, dh);
        dk.middleCols(kv * dh, dh) += ds.transpose() * lt.q.middleCols(hq * dh, dh);
      }
      apply_rope(dq, pos, unrope);
      apply_rope(dk, pos, unrope);

      const MatD& a = lt.attn_norm.y;
      out.d_wk[li] += a.transpose() * dk;
      out.d_wv[li] += a.transpose() * dv;

      const MatD da = dq * L.wq.transpose() + dk * L.wk.transpose() + dv * L.wv.transpose();
      dx = dx_mid + norm_bwd(lt.x_in, lt.attn_norm.inv_rms, L.attn_norm, da);
    }
  }
  out.loss *= inv_total;
  for (const auto& g : out.d_wk)
    if (!g.allFinite()) throw NumericError("non-finite gradient");
  return out;
}

LossAndGrads loss_and_grads(const ModelWeights& w, std::span<const Sequence> batch) {
  return loss_and_grads(w.cast<double>(), batch);
}

}  // namespace xlkv
