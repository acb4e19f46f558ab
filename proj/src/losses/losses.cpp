#include "tsae/losses/losses.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace tsae::loss {

void LossWeights::validate() const {
    if (!(eta >= 0) || !(alpha >= 0) || !(lambda >= 0)) throw std::invalid_argument("loss weights must be nonnegative");
    if (!(tau > 0)) throw std::invalid_argument("InfoNCE temperature must be positive");
}

namespace {

double inv(std::size_t n) { return 1.0 / static_cast<double>(n); }

std::size_t argmax_row(const Tensor& y, std::size_t row) {
    const std::size_t K = y.dim(1);
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
        if (y.at(row, k) > y.at(row, best)) best = k;
    }
    return best;
}

}  // namespace

NodeId reconstruction(Graph& g, NodeId x, NodeId recon) {
    const std::size_t B = g.shape(x)[0];
    return g.scale(g.sq_l2(g.sub(recon, x)), inv(B));
}

NodeId active_count(Graph& g, const sae::SAEModel& model, const sae::EncodeNodes& enc) {
    const std::size_t B = g.shape(enc.code)[0];
    if (model.config().activation == sae::Activation::JumpRelu) {
        return g.scale(g.sum(g.step(enc.pre, enc.phi, model.config().ste_eps)), inv(B));
    }
    double n = 0;
    for (double v : g.value(enc.code).values()) n += v > 0;
    return g.constant(Tensor::scalar(n * inv(B)));
}

NodeId label_fidelity(Graph& g, const bb::BlackBox& f, const Tensor& x, NodeId recon) {
    const NodeId fx = g.constant(f.predict_batch(x));
    return g.scale(g.sq_l2(g.sub(f.apply(g, recon), fx)), inv(x.dim(0)));
}

Recombination sample_recombination(std::size_t batch, std::size_t d, std::size_t n_samples, Rng& rng) {
    if (n_samples == 0) throw std::invalid_argument("compositional consistency needs at least one sample");
    Recombination plan{Tensor({n_samples, batch}, 0.0), Tensor({n_samples, batch}, 0.0), Tensor({n_samples, d}, 0.0)};
    for (std::size_t s = 0; s < n_samples; ++s) {
        const std::size_t a = rng.index(batch);
        std::size_t b = a;
        if (batch > 1) {
            b = rng.index(batch - 1);
            if (b >= a) ++b;
        }
        plan.select_a.at(s, a) = 1.0;
        plan.select_b.at(s, b) = 1.0;
        for (std::size_t k = 0; k < d; ++k) plan.take_a.at(s, k) = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    return plan;
}

NodeId recombine(Graph& g, NodeId codes, const Recombination& plan) {
    Tensor take_b = plan.take_a;
    for (double& v : take_b.values()) v = 1.0 - v;
    const NodeId from_a = g.mul(g.matmul(g.constant(plan.select_a), codes), g.constant(plan.take_a));
    const NodeId from_b = g.mul(g.matmul(g.constant(plan.select_b), codes), g.constant(std::move(take_b)));
    return g.add(from_a, from_b);
}

Tensor recombine_codes(const Tensor& codes, std::size_t n_samples, Rng& rng) {
    Graph g;
    return g.value(recombine(g, g.constant(codes), sample_recombination(codes.dim(0), codes.dim(1), n_samples, rng)));
}

NodeId compositional_consistency(Graph& g, sae::SAEModel& model, NodeId c_prime, const sae::Pass& pass) {
    const NodeId regenerated = model.decode(g, c_prime, pass);
    const NodeId reencoded = model.encode(g, regenerated, pass).code;
    return g.scale(g.sq_l2(g.sub(reencoded, c_prime)), inv(g.shape(c_prime)[0]));
}

std::vector<Intervention> sample_interventions(const Tensor& codes, Rng& rng) {
    const std::size_t B = codes.dim(0), d = codes.dim(1);
    if (B < 2) throw std::invalid_argument("counterfactual loss needs a batch of at least 2 instances");
    if (d < 2) throw std::invalid_argument("counterfactual loss needs at least 2 concepts");
    std::vector<std::size_t> active;
    for (std::size_t k = 0; k < d; ++k) {
        for (std::size_t b = 0; b < B; ++b) {
            if (codes.at(b, k) > 0) {
                active.push_back(k);
                break;
            }
        }
    }
    std::vector<std::size_t> concepts;
    if (active.size() >= 2) {
        const std::size_t i = rng.index(active.size());
        std::size_t j = rng.index(active.size() - 1);
        if (j >= i) ++j;
        concepts = {active[i], active[j]};
    } else {
        // Too few active concepts: top up with uniformly drawn distinct indices.
        concepts = active;
        while (concepts.size() < 2) {
            const std::size_t k = rng.index(d);
            if (std::find(concepts.begin(), concepts.end(), k) == concepts.end()) concepts.push_back(k);
        }
    }
    std::vector<Intervention> out;
    for (std::size_t k : concepts) {
        // Prefer members in which the ablation changes the code.
        std::vector<std::size_t> pool;
        for (std::size_t b = 0; b < B; ++b) {
            if (codes.at(b, k) > 0) pool.push_back(b);
        }
        if (pool.size() < 2) {
            pool.resize(B);
            for (std::size_t b = 0; b < B; ++b) pool[b] = b;
        }
        const std::size_t i = rng.index(pool.size());
        std::size_t j = rng.index(pool.size() - 1);
        if (j >= i) ++j;
        out.push_back({k, {pool[i], pool[j]}});
    }
    return out;
}

NodeId apply_interventions(Graph& g, NodeId codes, const std::vector<Intervention>& interventions,
                           std::vector<std::size_t>& groups) {
    const Shape s = g.shape(codes);
    const std::size_t B = s[0], d = s[1];
    std::vector<NodeId> rows;
    groups.clear();
    for (std::size_t id = 0; id < interventions.size(); ++id) {
        const Intervention& iv = interventions[id];
        if (iv.index >= d) throw std::out_of_range("intervention concept " + std::to_string(iv.index) + " >= d");
        Tensor mask({1, d}, 1.0);
        mask[iv.index] = 0.0;
        const NodeId m = g.constant(std::move(mask));
        for (std::size_t member : iv.members) {
            if (member >= B) throw std::out_of_range("intervention member outside the batch");
            rows.push_back(g.mul(g.slice(codes, 0, member, member + 1), m));
            groups.push_back(id);
        }
    }
    if (rows.empty()) throw std::invalid_argument("no interventions to apply");
    return rows.size() == 1 ? rows[0] : g.concat(rows, 0);
}

NodeId info_nce(Graph& g, NodeId y, const std::vector<std::size_t>& groups, double tau) {
    const std::size_t N = g.shape(y)[0];
    if (groups.size() != N) throw std::invalid_argument("info_nce: one group id per row required");
    if (std::set<std::size_t>(groups.begin(), groups.end()).size() < 2) {
        throw std::invalid_argument("info_nce: a single intervention leaves no negatives");
    }
    std::vector<std::size_t> positives(N, 0);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < N; ++j) positives[i] += (i != j && groups[i] == groups[j]);
        if (positives[i] == 0) throw std::invalid_argument("info_nce: every intervention needs at least 2 instances");
    }
    // Ordered pairs (i, j), j != i, grouped by anchor i.
    const std::size_t M = N * (N - 1);
    Tensor sel_a({M, N}, 0.0), sel_b({M, N}, 0.0), w({M}, 0.0);
    std::size_t r = 0;
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < N; ++j) {
            if (i == j) continue;
            sel_a.at(r, i) = 1.0;
            sel_b.at(r, j) = 1.0;
            if (groups[i] == groups[j]) w[r] = 1.0 / (static_cast<double>(positives[i]) * static_cast<double>(N));
            ++r;
        }
    }
    const NodeId sims = g.cosine_sim(g.matmul(g.constant(sel_a), y), g.matmul(g.constant(sel_b), y));
    const NodeId logits = g.scale(sims, 1.0 / tau);
    const NodeId log_den = g.log(g.sum(g.reshape(g.exp(logits), {N, N - 1}), 1));
    return g.sub(g.mean(log_den), g.sum(g.mul(logits, g.constant(std::move(w)))));
}

Objective build_objective(Graph& g, sae::SAEModel& model, const bb::BlackBox& f, const Tensor& x,
                          const ObjectiveOptions& opts, Rng& rng) {
    opts.weights.validate();
    const LossWeights& w = opts.weights;
    const std::size_t B = x.dim(0);
    sae::Pass pass;
    pass.training = opts.training;
    pass.update_stats = opts.update_stats;
    pass.gamma = opts.gamma;
    pass.masks = opts.training ? sae::MaskMode::Sample : sae::MaskMode::Expectation;
    pass.mask_rng = &rng;

    const NodeId xc = g.constant(x);
    const sae::EncodeNodes enc = model.encode(g, xc, pass);
    const Tensor codes = g.value(enc.code);

    NodeId decode_in = enc.code;
    std::vector<std::size_t> groups;
    if (w.lambda > 0) {
        const std::vector<Intervention> ivs = sample_interventions(codes, rng);
        const NodeId cf_codes = apply_interventions(g, enc.code, ivs, groups);
        const NodeId parts[] = {enc.code, cf_codes};
        decode_in = g.concat(parts, 0);
    }
    const NodeId decoded = model.decode(g, decode_in, pass);
    const NodeId recon = w.lambda > 0 ? g.slice(decoded, 0, 0, B) : decoded;

    Objective out;
    LossReport& rep = out.report;
    const NodeId rec = reconstruction(g, xc, recon);
    const NodeId l0 = active_count(g, model, enc);
    const NodeId sae_term = g.add(rec, g.scale(l0, w.eta));

    const Tensor fx = f.predict_batch(x);
    const NodeId fr = f.apply(g, recon);
    const NodeId lf = g.scale(g.sq_l2(g.sub(fr, g.constant(fx))), inv(B));
    NodeId total = g.add(sae_term, lf);

    rep.recon = g.value(rec).item();
    rep.sparsity = g.value(l0).item();
    rep.sae = g.value(sae_term).item();
    rep.label_fidelity = g.value(lf).item();
    double active = 0;
    for (double v : codes.values()) active += v > 0;
    rep.l0 = active / static_cast<double>(B);
    if (f.output_mode() == bb::OutputMode::ClassProbabilities) {
        const Tensor& fv = g.value(fr);
        std::size_t agree = 0;
        for (std::size_t b = 0; b < B; ++b) agree += argmax_row(fx, b) == argmax_row(fv, b);
        rep.agreement = static_cast<double>(agree) * inv(B);
    }

    if (w.alpha > 0) {
        sae::Pass cc_pass = pass;
        cc_pass.update_stats = false;
        const Recombination plan = sample_recombination(B, model.d(), opts.cc_samples ? opts.cc_samples : B, rng);
        // c' is a sample from the recombination distribution and enters as data.
        out.c_prime = opts.c_prime ? *opts.c_prime : g.value(recombine(g, enc.code, plan));
        const NodeId cc = compositional_consistency(g, model, g.constant(out.c_prime), cc_pass);
        rep.cc = g.value(cc).item();
        total = g.add(total, g.scale(cc, w.alpha));
    }
    if (w.lambda > 0) {
        const NodeId cf_x = g.slice(decoded, 0, B, g.shape(decoded)[0]);
        const NodeId cf = info_nce(g, f.apply(g, cf_x), groups, w.tau);
        rep.cf = g.value(cf).item();
        total = g.add(total, g.scale(cf, w.lambda));
    }
    rep.total = g.value(total).item();
    out.total = total;
    return out;
}

}  // namespace tsae::loss
