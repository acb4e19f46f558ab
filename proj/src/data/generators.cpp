#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "tsae/data/dataset.hpp"
#include "tsae/numerics/rng.hpp"

namespace tsae::data {

namespace {

constexpr std::size_t kPlacementRetries = 1000;

std::size_t spike_count(std::size_t T, std::size_t period) { return period == 0 ? 0 : T / period; }

LabeledSeries materialize(GenerativeFactors f, int label) {
    LabeledSeries s;
    s.x = render(f);
    s.gt_mask = render_mask(f);
    s.has_mask = true;
    s.y = label;
    s.factors = std::move(f);
    return s;
}

void check_balance(std::size_t n, std::size_t classes, const char* name) {
    if (n > 0 && n < classes) {
        throw std::invalid_argument(std::string(name) + ": n=" + std::to_string(n) + " cannot balance " +
                                    std::to_string(classes) + " classes");
    }
}

Pattern make_trend(Rng& r, std::size_t length, int direction, double amplitude) {
    Pattern p;
    p.kind = PatternKind::Trend;
    p.direction = direction;
    p.amplitude = amplitude;
    p.length = length;
    // A quarter period or less of the sinusoid keeps the segment monotone.
    p.wavelength = r.uniform(4.0 * static_cast<double>(length), 6.0 * static_cast<double>(length));
    return p;
}

Dataset seqcomb(const char* name, std::size_t n, std::size_t T, std::size_t D, bool multichannel, std::uint64_t seed,
                const GeneratorOptions& opt) {
    if (T < 45) throw std::invalid_argument(std::string(name) + ": T must be at least 45, got " + std::to_string(T));
    check_balance(n, 4, name);
    Dataset d;
    d.name = name;
    d.channels = D;
    d.length = T;
    d.n_classes = 4;
    d.items.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int cls = static_cast<int>(i % 4);
        Rng r(derive_seed(seed, i));
        GenerativeFactors f;
        f.generator = name;
        f.channels = D;
        f.length = T;
        f.noise_seed = derive_seed(seed, i, 1);
        f.noise_sigma = opt.noise_sigma;
        if (cls != 0) {
            const std::size_t l1 = static_cast<std::size_t>(r.integer(10, 20));
            const std::size_t l2 = static_cast<std::size_t>(r.integer(10, 20));
            bool placed = false;
            std::size_t s1 = 0, s2 = 0;
            for (std::size_t attempt = 0; attempt < kPlacementRetries && !placed; ++attempt) {
                s1 = r.index(T - l1 + 1);
                s2 = r.index(T - l2 + 1);
                placed = s1 + l1 <= s2 || s2 + l2 <= s1;
            }
            if (!placed) throw std::runtime_error(std::string(name) + ": could not place disjoint patterns");
            const int first_dir = cls == 2 ? -1 : 1;
            const int second_dir = cls == 1 ? 1 : -1;
            Pattern a = make_trend(r, l1, first_dir, opt.amplitude);
            Pattern b = make_trend(r, l2, second_dir, opt.amplitude);
            a.start = std::min(s1, s2);
            b.start = std::max(s1, s2);
            if (s1 > s2) std::swap(a.length, b.length), std::swap(a.wavelength, b.wavelength);
            if (multichannel) {
                a.channel = r.index(D);
                b.channel = r.index(D);
            } else if (D > 1) {
                a.channel = b.channel = r.index(D);
            }
            f.patterns = {a, b};
        }
        d.items.push_back(materialize(std::move(f), cls));
    }
    return d;
}

}  // namespace

std::string pattern_kind_name(PatternKind k) {
    switch (k) {
    case PatternKind::Spike: return "spike";
    case PatternKind::Trend: return "trend";
    case PatternKind::LowVariance: return "low_variance";
    }
    return "unknown";
}

Tensor render(const GenerativeFactors& f) {
    const std::size_t D = f.channels, T = f.length;
    Tensor z({D, T});
    Rng r(f.noise_seed);
    for (double& v : z.values()) v = r.normal();
    Tensor x({D, T});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = f.noise_sigma * z[i];
    for (const Pattern& p : f.patterns) {
        if (p.channel >= D) throw std::invalid_argument("pattern channel out of range");
        double* row = x.values().data() + p.channel * T;
        const double* zrow = z.values().data() + p.channel * T;
        switch (p.kind) {
        case PatternKind::Spike: {
            const std::size_t count = spike_count(T, p.period);
            for (std::size_t m = 0; m < count; ++m) row[p.phase % p.period + m * p.period] += p.direction * p.amplitude;
            break;
        }
        case PatternKind::Trend:
            for (std::size_t s = 0; s < p.length && p.start + s < T; ++s) {
                row[p.start + s] +=
                    p.direction * p.amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(s) / p.wavelength);
            }
            break;
        case PatternKind::LowVariance:
            for (std::size_t s = 0; s < p.length && p.start + s < T; ++s) {
                row[p.start + s] = p.level + p.sigma * zrow[p.start + s];
            }
            break;
        }
    }
    return x;
}

Tensor render_mask(const GenerativeFactors& f) {
    const std::size_t T = f.length;
    Tensor m({f.channels, T}, 0.0);
    for (const Pattern& p : f.patterns) {
        double* row = m.values().data() + p.channel * T;
        if (p.kind == PatternKind::Spike) {
            const std::size_t count = spike_count(T, p.period);
            for (std::size_t k = 0; k < count; ++k) row[p.phase % p.period + k * p.period] = 1.0;
        } else {
            for (std::size_t s = 0; s < p.length && p.start + s < T; ++s) row[p.start + s] = 1.0;
        }
    }
    return m;
}

int relabel(const GenerativeFactors& f) {
    if (f.generator == "freqshapes") {
        if (f.patterns.size() != 1 || f.patterns[0].kind != PatternKind::Spike) return -1;
        const Pattern& p = f.patterns[0];
        const int up = p.direction > 0 ? 1 : 0;
        if (p.amplitude <= 0) return -1;
        if (p.period == 10) return up;
        if (p.period == 17) return 2 + up;
        return -1;
    }
    if (f.generator == "seqcomb_uv" || f.generator == "seqcomb_mv") {
        if (f.patterns.empty()) return 0;
        if (f.patterns.size() != 2) return -1;
        std::vector<Pattern> ps = f.patterns;
        std::sort(ps.begin(), ps.end(), [](const Pattern& a, const Pattern& b) { return a.start < b.start; });
        if (ps[0].direction > 0 && ps[1].direction > 0) return 1;
        if (ps[0].direction < 0 && ps[1].direction < 0) return 2;
        if (ps[0].direction > 0 && ps[1].direction < 0) return 3;
        return -1;
    }
    if (f.generator == "lowvar") {
        if (f.patterns.size() != 1 || f.patterns[0].kind != PatternKind::LowVariance) return -1;
        const Pattern& p = f.patterns[0];
        return static_cast<int>(p.channel * 2 + (p.level > 0 ? 1 : 0));
    }
    return -1;
}

Dataset gen_freqshapes(std::size_t n, std::size_t T, std::uint64_t seed, const GeneratorOptions& opt) {
    if (T < 20) throw std::invalid_argument("freqshapes: T must be at least 20, got " + std::to_string(T));
    check_balance(n, 4, "freqshapes");
    const std::size_t D = opt.channels == 0 ? 1 : opt.channels;
    Dataset d;
    d.name = "freqshapes";
    d.channels = D;
    d.length = T;
    d.n_classes = 4;
    d.items.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int cls = static_cast<int>(i % 4);
        Rng r(derive_seed(seed, i));
        Pattern p;
        p.kind = PatternKind::Spike;
        p.period = cls < 2 ? 10 : 17;
        p.direction = cls % 2 == 1 ? 1 : -1;
        p.amplitude = opt.amplitude;
        p.phase = r.index(p.period);
        p.channel = D > 1 ? r.index(D) : 0;
        GenerativeFactors f;
        f.generator = "freqshapes";
        f.channels = D;
        f.length = T;
        f.noise_seed = derive_seed(seed, i, 1);
        f.noise_sigma = opt.noise_sigma;
        f.patterns = {p};
        d.items.push_back(materialize(std::move(f), cls));
    }
    return d;
}

Dataset gen_seqcomb_uv(std::size_t n, std::size_t T, std::uint64_t seed, const GeneratorOptions& opt) {
    return seqcomb("seqcomb_uv", n, T, opt.channels == 0 ? 1 : opt.channels, false, seed, opt);
}

Dataset gen_seqcomb_mv(std::size_t n, std::size_t T, std::size_t D, std::uint64_t seed, const GeneratorOptions& opt) {
    if (D < 2) throw std::invalid_argument("seqcomb_mv: D must be at least 2");
    return seqcomb("seqcomb_mv", n, T, D, true, seed, opt);
}

Dataset gen_lowvar(std::size_t n, std::size_t T, std::size_t D, std::uint64_t seed, const GeneratorOptions& opt) {
    if (D < 2) throw std::invalid_argument("lowvar: D must be at least 2");
    if (T < 20) throw std::invalid_argument("lowvar: T must be at least 20, got " + std::to_string(T));
    const std::size_t classes = std::min(2 * D, std::max<std::size_t>(opt.max_classes, 2));
    check_balance(n, classes, "lowvar");
    Dataset d;
    d.name = "lowvar";
    d.channels = D;
    d.length = T;
    d.n_classes = classes;
    d.items.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int cls = static_cast<int>(i % classes);
        Rng r(derive_seed(seed, i));
        Pattern p;
        p.kind = PatternKind::LowVariance;
        p.channel = static_cast<std::size_t>(cls) / 2;
        p.level = cls % 2 == 1 ? 1.0 : -1.0;
        p.sigma = 0.1 * opt.noise_sigma;
        p.length = static_cast<std::size_t>(r.integer(10, 20));
        p.start = r.index(T - p.length + 1);
        GenerativeFactors f;
        f.generator = "lowvar";
        f.channels = D;
        f.length = T;
        f.noise_seed = derive_seed(seed, i, 1);
        f.noise_sigma = opt.noise_sigma;
        f.patterns = {p};
        d.items.push_back(materialize(std::move(f), cls));
    }
    return d;
}

Dataset generate(const std::string& generator, std::size_t n, std::size_t T, std::size_t D, std::uint64_t seed,
                 const GeneratorOptions& opt) {
    GeneratorOptions o = opt;
    if (generator == "freqshapes") {
        if (D) o.channels = D;
        return gen_freqshapes(n, T, seed, o);
    }
    if (generator == "seqcomb_uv") {
        if (D) o.channels = D;
        return gen_seqcomb_uv(n, T, seed, o);
    }
    if (generator == "seqcomb_mv") return gen_seqcomb_mv(n, T, D, seed, o);
    if (generator == "lowvar") return gen_lowvar(n, T, D, seed, o);
    throw std::invalid_argument("unknown generator '" + generator + "'");
}

FactorEdit inverse_edit(const GenerativeFactors& f, const FactorEdit& edit) {
    FactorEdit inv = edit;
    if (edit.field == "noise_sigma") {
        inv.value = f.noise_sigma;
        return inv;
    }
    if (edit.pattern >= f.patterns.size()) throw std::invalid_argument("edit targets a missing pattern");
    const Pattern& p = f.patterns[edit.pattern];
    if (edit.field == "direction") inv.value = p.direction;
    else if (edit.field == "period") inv.value = static_cast<double>(p.period);
    else if (edit.field == "amplitude") inv.value = p.amplitude;
    else if (edit.field == "phase") inv.value = static_cast<double>(p.phase);
    else if (edit.field == "start") inv.value = static_cast<double>(p.start);
    else if (edit.field == "length") inv.value = static_cast<double>(p.length);
    else if (edit.field == "channel") inv.value = static_cast<double>(p.channel);
    else if (edit.field == "level") inv.value = p.level;
    else if (edit.field == "wavelength") inv.value = p.wavelength;
    else throw std::invalid_argument("unknown factor field '" + edit.field + "'");
    return inv;
}

GenerativeFactors apply_edit(const GenerativeFactors& f, const FactorEdit& edit) {
    GenerativeFactors out = f;
    if (edit.field == "noise_sigma") {
        if (!(edit.value >= 0)) throw std::invalid_argument("noise_sigma must be nonnegative");
        out.noise_sigma = edit.value;
        return out;
    }
    if (edit.pattern >= out.patterns.size()) {
        throw std::invalid_argument("edit of '" + edit.field + "' targets pattern " + std::to_string(edit.pattern) +
                                    " but the instance has " + std::to_string(out.patterns.size()));
    }
    Pattern& p = out.patterns[edit.pattern];
    auto as_index = [&](double v) {
        if (v < 0 || v != std::floor(v)) throw std::invalid_argument("field '" + edit.field + "' needs an integer");
        return static_cast<std::size_t>(v);
    };
    const bool spike = p.kind == PatternKind::Spike;
    if (edit.field == "direction") {
        if (edit.value != 1 && edit.value != -1) throw std::invalid_argument("direction must be +1 or -1");
        if (p.kind == PatternKind::LowVariance) throw std::invalid_argument("low-variance segments have no direction");
        p.direction = static_cast<int>(edit.value);
    } else if (edit.field == "period" && spike) {
        p.period = as_index(edit.value);
        if (p.period == 0 || p.period > f.length) throw std::invalid_argument("period out of range");
    } else if (edit.field == "amplitude" && p.kind != PatternKind::LowVariance) {
        p.amplitude = edit.value;
    } else if (edit.field == "phase" && spike) {
        p.phase = as_index(edit.value);
    } else if (edit.field == "start" && !spike) {
        p.start = as_index(edit.value);
        if (p.start + p.length > f.length) throw std::invalid_argument("start places the pattern past the end");
    } else if (edit.field == "length" && !spike) {
        p.length = as_index(edit.value);
        if (p.start + p.length > f.length) throw std::invalid_argument("length runs past the end");
    } else if (edit.field == "channel") {
        p.channel = as_index(edit.value);
        if (p.channel >= f.channels) throw std::invalid_argument("channel out of range");
    } else if (edit.field == "level" && p.kind == PatternKind::LowVariance) {
        p.level = edit.value;
    } else if (edit.field == "wavelength" && p.kind == PatternKind::Trend) {
        if (!(edit.value > 0)) throw std::invalid_argument("wavelength must be positive");
        p.wavelength = edit.value;
    } else {
        throw std::invalid_argument("field '" + edit.field + "' does not apply to a " + pattern_kind_name(p.kind) +
                                    " pattern");
    }
    return out;
}

Tensor intervene_factor(const GenerativeFactors& f, const FactorEdit& edit) { return render(apply_edit(f, edit)); }

Tensor intervene_factor(const std::optional<GenerativeFactors>& f, const FactorEdit& edit) {
    if (!f) throw std::invalid_argument("instance has no generative factors");
    return intervene_factor(*f, edit);
}

Split stratified_split(const Dataset& d, std::uint64_t seed, double train_frac, double val_frac) {
    if (train_frac < 0 || val_frac < 0 || train_frac + val_frac > 1) throw std::invalid_argument("bad split fractions");
    std::vector<std::vector<std::size_t>> groups(d.regression() ? 1 : d.n_classes);
    for (std::size_t i = 0; i < d.size(); ++i) {
        const std::size_t g = d.regression() ? 0 : static_cast<std::size_t>(d.items[i].label());
        if (g >= groups.size()) throw std::invalid_argument("label out of range in split");
        groups[g].push_back(i);
    }
    Rng r(derive_seed(seed, 0x5917));
    Split s;
    for (auto& g : groups) {
        r.shuffle(g);
        const auto n = static_cast<double>(g.size());
        const auto ntr = static_cast<std::size_t>(std::llround(train_frac * n));
        const auto nva = std::min(g.size() - ntr, static_cast<std::size_t>(std::llround(val_frac * n)));
        s.train.insert(s.train.end(), g.begin(), g.begin() + ntr);
        s.val.insert(s.val.end(), g.begin() + ntr, g.begin() + ntr + nva);
        s.test.insert(s.test.end(), g.begin() + ntr + nva, g.end());
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

Dataset subset(const Dataset& d, const std::vector<std::size_t>& idx) {
    Dataset out;
    out.name = d.name;
    out.channels = d.channels;
    out.length = d.length;
    out.n_classes = d.n_classes;
    out.items.reserve(idx.size());
    for (auto i : idx) out.items.push_back(d.items.at(i));
    return out;
}

}  // namespace tsae::data
