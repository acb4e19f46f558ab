#include "tsae/metrics/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "tsae/interpret/interpret.hpp"
#include "tsae/metrics/faithfulness.hpp"
#include "tsae/metrics/metrics.hpp"
#include "tsae/numerics/rng.hpp"

namespace tsae::metrics {

namespace {

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<double> subsample(std::vector<double> v, std::size_t max_points, Rng& rng) {
    if (max_points == 0 || v.size() <= max_points) return v;
    rng.shuffle(v);
    v.resize(max_points);
    return v;
}

nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

EvalReport evaluate(causal::ConceptModel& model, const bb::BlackBox& f, const data::Dataset& d,
                    const std::vector<std::size_t>& idx, const EvalOptions& opts) {
    if (idx.size() < 2) throw std::invalid_argument("evaluation needs at least 2 instances");
    const std::size_t n = idx.size(), D = d.channels, T = d.length, DT = D * T;
    EvalReport r;
    r.instances = n;

    std::vector<double> xs, recs;
    xs.reserve(n * DT);
    for (std::size_t i : idx) xs.insert(xs.end(), d.items[i].x.values().begin(), d.items[i].x.values().end());
    const Tensor X({n, D, T}, xs);
    const Tensor C = model.encode(X);
    const Tensor R = model.decode(C);
    recs.assign(R.values().begin(), R.values().end());

    const Tensor y = f.predict_batch(X), yr = f.predict_batch(R);
    if (f.output_mode() == bb::OutputMode::ScalarRegression) {
        r.agreement = std::numeric_limits<double>::quiet_NaN();
    } else {
        const auto a = causal::predicted_classes(f, y), b = causal::predicted_classes(f, yr);
        std::size_t same = 0;
        for (std::size_t i = 0; i < n; ++i) same += a[i] == b[i];
        r.agreement = static_cast<double>(same) / static_cast<double>(n);
    }
    for (std::size_t i = 0; i < xs.size(); ++i) r.recon_mse += (xs[i] - recs[i]) * (xs[i] - recs[i]);
    r.recon_mse /= static_cast<double>(n);
    for (double v : C.values()) r.mean_l0 += v != 0.0;
    r.mean_l0 /= static_cast<double>(n);

    Rng rng(derive_seed(opts.seed, 0xe7a1));
    std::vector<double> ap, rap, aup, raup, aur, raur, fx;
    for (std::size_t j = 0; j < n; ++j) {
        const auto& it = d.items[idx[j]];
        const Tensor x = it.x;
        const FxResult fr = faithfulness_fx(x, model, f, opts.removal_fraction);
        fx.push_back(fr.value);
        r.fx_no_active += fr.no_active;
        if (!it.has_mask) continue;
        const auto gt = it.gt_mask.values();
        if (std::none_of(gt.begin(), gt.end(), [](double v) { return v > 0; })) continue;
        const Tensor scores = opts.oracle_saliency ? it.gt_mask : interp::explain(x, model, f).mask.scores;
        std::vector<double> noise(DT);
        for (double& v : noise) v = rng.uniform();
        ap.push_back(auprc(scores.values(), gt));
        rap.push_back(auprc(noise, gt));
        const AupAur m = aup_aur(scores.values(), gt, opts.thresholds);
        const AupAur rm = aup_aur(noise, gt, opts.thresholds);
        aup.push_back(m.aup);
        aur.push_back(m.aur);
        raup.push_back(rm.aup);
        raur.push_back(rm.aur);
    }
    r.scored_instances = ap.size();
    r.auprc = mean_of(ap);
    r.aup = mean_of(aup);
    r.aur = mean_of(aur);
    r.random_auprc = mean_of(rap);
    r.random_aup = mean_of(raup);
    r.random_aur = mean_of(raur);
    r.auprc_t = ap.size() >= 2 ? paired_t(ap, rap) : std::numeric_limits<double>::quiet_NaN();
    r.fx_mean = mean_of(fx);
    for (double v : fx) r.fx_std += (v - r.fx_mean) * (v - r.fx_mean);
    r.fx_std = std::sqrt(r.fx_std / static_cast<double>(fx.size() > 1 ? fx.size() - 1 : 1));

    const MmdResult mm = mmd(X.reshaped({n, DT}), R.reshaped({n, DT}));
    r.mmd = mm.value;
    r.mmd_raw = mm.raw;
    r.mmd_bandwidth_fallback = mm.bandwidth_fallback;
    const KlKde kk = kl_and_kde(subsample(xs, opts.max_points, rng), subsample(recs, opts.max_points, rng), opts.kl_bins);
    r.kl = kk.kl;
    r.kde_ll = kk.kde_ll;
    return r;
}

std::string report_json(const EvalReport& r) {
    return nlohmann::json{{"instances", r.instances},
                          {"scored_instances", r.scored_instances},
                          {"auprc", num(r.auprc)},
                          {"aup", num(r.aup)},
                          {"aur", num(r.aur)},
                          {"random_auprc", num(r.random_auprc)},
                          {"random_aup", num(r.random_aup)},
                          {"random_aur", num(r.random_aur)},
                          {"auprc_t", num(r.auprc_t)},
                          {"fx_mean", num(r.fx_mean)},
                          {"fx_std", num(r.fx_std)},
                          {"fx_no_active", r.fx_no_active},
                          {"kl", num(r.kl)},
                          {"kde_ll", num(r.kde_ll)},
                          {"mmd", num(r.mmd)},
                          {"mmd_raw", num(r.mmd_raw)},
                          {"mmd_bandwidth_fallback", r.mmd_bandwidth_fallback},
                          {"agreement", num(r.agreement)},
                          {"recon_mse", num(r.recon_mse)},
                          {"mean_l0", num(r.mean_l0)}}
        .dump(2);
}

std::string report_csv_header() {
    return "instances,scored_instances,auprc,aup,aur,random_auprc,random_aup,random_aur,auprc_t,fx_mean,fx_std,kl,"
           "kde_ll,mmd,agreement,recon_mse,mean_l0";
}

std::string report_csv_row(const EvalReport& r) {
    std::ostringstream os;
    os.precision(10);
    os << r.instances << ',' << r.scored_instances;
    for (double v : {r.auprc, r.aup, r.aur, r.random_auprc, r.random_aup, r.random_aur, r.auprc_t, r.fx_mean, r.fx_std,
                     r.kl, r.kde_ll, r.mmd, r.agreement, r.recon_mse, r.mean_l0}) {
        os << ',' << v;
    }
    return os.str();
}

}  // namespace tsae::metrics
