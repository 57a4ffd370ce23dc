#include "ibq/diag/grad_cases.hpp"
#include "ibq/core/ops.hpp"
#include "ibq/quant/losses.hpp"

namespace ibq::diag {
namespace {

// Varies either the features (which == 0) or the codebook (which == 1).
template <class F>
GradCase with_codebook(std::string name, std::int64_t B, std::int64_t K, std::int64_t D, int which,
                       F f) {
  return {std::move(name), [=](Rng& rng) -> Instance {
            Tensor z = rand64(rng, {B, D});
            Tensor c = rand64(rng, {K, D});
            Tensor w = rand64(rng, {B, D});
            if (which == 0) {
              return {z, [=](const Tensor& v) { return f(v, Codebook::from_embeddings(c.clone()), w); }};
            }
            return {c, [=](const Tensor& v) { return f(z, Codebook::from_embeddings(v), w); }};
          }};
}

}  // namespace

std::vector<GradCase> quant_grad_cases() {
  std::vector<GradCase> cs;
  const char* arg[] = {"z", "codebook"};
  for (int i = 0; i < 2; ++i) {
    cs.push_back(with_codebook(std::string("ibq_zq/") + arg[i], 4, 16, 8, i,
                               [](const Tensor& z, const Codebook& cb, const Tensor& w) {
                                 return weighted_sum(ibq_quantize(z, cb).z_q, w);
                               }));
    cs.push_back(with_codebook(std::string("ibq_scaled/") + arg[i], 4, 8, 6, i,
                               [](const Tensor& z, const Codebook& cb, const Tensor& w) {
                                 IbqOptions o;
                                 o.logit_scale = 2.5;
                                 return weighted_sum(ibq_quantize(z, cb, o).z_q, w);
                               }));
    cs.push_back(with_codebook(std::string("double_quant_loss/") + arg[i], 5, 12, 4, i,
                               [](const Tensor& z, const Codebook& cb, const Tensor&) {
                                 return double_quant_loss(z, ibq_quantize(z, cb), 0.25);
                               }));
    cs.push_back(with_codebook(std::string("ibq_entropy/") + arg[i], 6, 8, 4, i,
                               [](const Tensor& z, const Codebook& cb, const Tensor&) {
                                 return entropy_penalty(ibq_quantize(z, cb).soft).loss;
                               }));
    cs.push_back(with_codebook(std::string("vqgan_zq/") + arg[i], 4, 10, 5, i,
                               [](const Tensor& z, const Codebook& cb, const Tensor& w) {
                                 return weighted_sum(vqgan_quantize(z, cb).z_q, w);
                               }));
    cs.push_back(with_codebook(std::string("vq_commit_loss/") + arg[i], 5, 10, 4, i,
                               [](const Tensor& z, const Codebook& cb, const Tensor&) {
                                 return vq_commit_loss(z, vqgan_quantize(z, cb), 0.25);
                               }));
    cs.push_back(with_codebook(std::string("naive_vq_loss/") + arg[i], 5, 10, 4, i,
                               [](const Tensor& z, const Codebook& cb, const Tensor& w) {
                                 QuantOut q = naive_vq_quantize(z, cb);
                                 return ops::add(weighted_sum(q.z_q, w), vq_commit_loss(z, q, 0.0));
                               }));
    cs.push_back(with_codebook(std::string("softvq_train/") + arg[i], 4, 9, 5, i,
                               [](const Tensor& z, const Codebook& cb, const Tensor& w) {
                                 return weighted_sum(softvq_quantize(z, cb, 0.5, true).z_q, w);
                               }));
    cs.push_back(with_codebook(std::string("softvq_loss/") + arg[i], 4, 9, 5, i,
                               [](const Tensor& z, const Codebook& cb, const Tensor&) {
                                 QuantOut q = softvq_quantize(z, cb, 0.7, true);
                                 Tensor e = attach_losses(z, q, 0.25);
                                 return ops::add(q.quant_loss, e);
                               }));
  }
  cs.push_back({"lfq_zq_entropy/z", [](Rng& rng) -> Instance {
                  Tensor z = signed_away_from_zero(rng, {6, 4});
                  Tensor w = rand64(rng, {6, 4});
                  return {z, [w](const Tensor& v) {
                            QuantOut q = lfq_quantize(v, LfqCodebook{4});
                            Tensor e = attach_losses(v, q, 0.25);
                            return ops::add(ops::add(weighted_sum(q.z_q, w), q.quant_loss), e);
                          }};
                }});
  cs.push_back({"straight_through_index/logits", [](Rng& rng) -> Instance {
                  Tensor logits = rand64(rng, {5, 7}, -2, 2);
                  Tensor w = rand64(rng, {5, 7});
                  return {logits, [w](const Tensor& v) {
                            Tensor soft = ops::softmax(v);
                            Tensor hard = ops::argmax_onehot(v).onehot;
                            return weighted_sum(straight_through_index(hard, soft), w);
                          }};
                }});
  cs.push_back({"entropy_penalty/logits", [](Rng& rng) -> Instance {
                  Tensor logits = rand64(rng, {6, 5}, -3, 3);
                  return {logits, [](const Tensor& v) { return entropy_penalty(ops::softmax(v)).loss; }};
                }});
  for (auto norm : {ReconNorm::l2, ReconNorm::l1}) {
    cs.push_back({norm == ReconNorm::l2 ? "reconstruction_loss/l2" : "reconstruction_loss/l1",
                  [norm](Rng& rng) -> Instance {
                    Tensor x = rand64(rng, {2, 3, 2, 2});
                    Tensor off = signed_away_from_zero(rng, {2, 3, 2, 2});
                    Tensor xh = ops::add(x, off);
                    return {xh, [x, norm](const Tensor& v) { return reconstruction_loss(v, x, norm); }};
                  }});
  }
  cs.push_back({"assemble_loss", [](Rng& rng) -> Instance {
                  Tensor x = rand64(rng, {3});
                  return {x, [](const Tensor& v) {
                            LossTerms t{ops::sum(ops::square(v)), ops::mean(ops::exp(v)),
                                        ops::sum(ops::tanh(v))};
                            return assemble_loss(t, LossWeights{0.7, 1.3, 0.1}).total;
                          }};
                }});
  return cs;
}

}  // namespace ibq::diag
