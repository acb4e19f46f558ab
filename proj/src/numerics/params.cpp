#include "tsae/numerics/params.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "tsae/io/binary.hpp"

namespace tsae {

Tensor& ParameterStore::add(const std::string& name, Tensor init, bool decay) {
    if (tensors_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    if (!decay) no_decay_.insert(name);
    return tensors_.emplace(name, std::move(init)).first->second;
}

BatchNormState& ParameterStore::add_bn(const std::string& name, std::size_t channels) {
    if (bn_.count(name)) throw std::invalid_argument("duplicate batch-norm state '" + name + "'");
    return bn_.emplace(name, BatchNormState(channels)).first->second;
}

Tensor& ParameterStore::get(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
}

const Tensor& ParameterStore::get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
}

BatchNormState& ParameterStore::bn(const std::string& name) {
    auto it = bn_.find(name);
    if (it == bn_.end()) throw std::out_of_range("unknown batch-norm state '" + name + "'");
    return it->second;
}

const BatchNormState& ParameterStore::bn(const std::string& name) const {
    auto it = bn_.find(name);
    if (it == bn_.end()) throw std::out_of_range("unknown batch-norm state '" + name + "'");
    return it->second;
}

std::size_t ParameterStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
}

std::uint64_t ParameterStore::checksum() const {
    io::Fnv1a h;
    for (const auto& [name, t] : tensors_) {
        h.update(name);
        for (auto d : t.shape()) h.update(&d, sizeof d);
        h.update(t.values().data(), t.size() * sizeof(double));
    }
    for (const auto& [name, s] : bn_) {
        h.update(name);
        h.update(s.running_mean.data(), s.running_mean.size() * sizeof(double));
        h.update(s.running_var.data(), s.running_var.size() * sizeof(double));
    }
    return h.digest();
}

void ParameterStore::write(std::ostream& os) const {
    io::write_u32(os, static_cast<std::uint32_t>(tensors_.size()));
    for (const auto& [name, t] : tensors_) {
        io::write_string(os, name);
        io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) io::write_u64(os, d);
        io::write_f64s(os, t.values());
    }
    io::write_u32(os, static_cast<std::uint32_t>(bn_.size()));
    for (const auto& [name, s] : bn_) {
        io::write_string(os, name);
        io::write_u64(os, s.running_mean.size());
        io::write_f64s(os, s.running_mean);
        io::write_f64s(os, s.running_var);
    }
}

void ParameterStore::read(std::istream& is) {
    const std::uint32_t n = io::read_u32(is);
    if (n != tensors_.size()) {
        throw std::runtime_error("checkpoint holds " + std::to_string(n) + " parameters, model expects " +
                                 std::to_string(tensors_.size()));
    }
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::string name = io::read_string(is, 4096);
        Tensor& t = get(name);
        const std::uint32_t rank = io::read_u32(is);
        Shape s(rank);
        for (auto& d : s) d = io::read_u64(is);
        if (s != t.shape()) {
            throw std::runtime_error("parameter '" + name + "' has shape " + shape_str(s) + ", model expects " +
                                     shape_str(t.shape()));
        }
        io::read_f64s(is, t.values());
    }
    const std::uint32_t nb = io::read_u32(is);
    if (nb != bn_.size()) throw std::runtime_error("checkpoint batch-norm state count mismatch");
    for (std::uint32_t i = 0; i < nb; ++i) {
        const std::string name = io::read_string(is, 4096);
        BatchNormState& s = bn(name);
        const std::uint64_t c = io::read_u64(is);
        if (c != s.running_mean.size()) throw std::runtime_error("batch-norm state '" + name + "' size mismatch");
        io::read_f64s(is, s.running_mean);
        io::read_f64s(is, s.running_var);
    }
}

void Optimizer::step(ParameterStore& params, const Gradients& grads) {
    ++t_;
    const double lr = cfg_.lr;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params.tensors()) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        if (g.size() != p.size()) throw std::invalid_argument("gradient size mismatch for '" + name + "'");
        auto& m = m_[name];
        if (m.empty()) m.assign(p.size(), 0.0);
        const double decay = params.decays(name) ? cfg_.weight_decay : 0.0;
        if (cfg_.kind == OptimizerKind::Adam) {
            auto& v = v_[name];
            if (v.empty()) v.assign(p.size(), 0.0);
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g[i] * g[i];
                const double mh = m[i] / bc1;
                const double vh = v[i] / bc2;
                p[i] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + decay * p[i]);
            }
        } else {
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = cfg_.momentum * m[i] + g[i];
                p[i] -= lr * (m[i] + decay * p[i]);
            }
        }
    }
}

void Optimizer::write(std::ostream& os) const {
    io::write_u64(os, t_);
    for (const auto* table : {&m_, &v_}) {
        io::write_u32(os, static_cast<std::uint32_t>(table->size()));
        for (const auto& [name, vals] : *table) {
            io::write_string(os, name);
            io::write_u64(os, vals.size());
            io::write_f64s(os, vals);
        }
    }
}

void Optimizer::read(std::istream& is) {
    t_ = io::read_u64(is);
    for (auto* table : {&m_, &v_}) {
        table->clear();
        const std::uint32_t n = io::read_u32(is);
        for (std::uint32_t i = 0; i < n; ++i) {
            std::string name = io::read_string(is, 4096);
            std::vector<double> vals(io::read_u64(is));
            io::read_f64s(is, vals);
            table->emplace(std::move(name), std::move(vals));
        }
    }
}

double clip_global_norm(Gradients& grads, double max_norm) {
    double ss = 0;
    for (const auto& [_, g] : grads) {
        for (double v : g.values()) ss += v * v;
    }
    const double norm = std::sqrt(ss);
    if (norm > max_norm && norm > 0) {
        const double s = max_norm / norm;
        for (auto& [_, g] : grads) {
            for (double& v : g.values()) v *= s;
        }
    }
    return norm;
}

}  // namespace tsae
