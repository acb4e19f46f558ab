#include <cerrno>
#include <csignal>
#include <cstring>
#include <istream>
#include <ostream>
#include <spawn.h>
#include <stdexcept>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "tsae/blackbox/blackbox.hpp"
#include "tsae/io/binary.hpp"

extern char** environ;

namespace tsae::bb {

using nlohmann::json;

namespace {

json handshake(const BlackBox& f) {
    return {{"type", "handshake"},
            {"output_mode", output_mode_name(f.output_mode())},
            {"input_shape", {f.channels(), f.length()}},
            {"output_dim", f.output_dim()},
            {"checksum", io::hex64(f.checksum())}};
}

Tensor parse_instance(const json& xj, std::size_t D, std::size_t T) {
    if (!xj.is_array() || xj.size() != D) throw std::invalid_argument("x must be a list of " + std::to_string(D) + " rows");
    Tensor x({D, T});
    for (std::size_t c = 0; c < D; ++c) {
        const auto& row = xj[c];
        if (!row.is_array() || row.size() != T) {
            throw std::invalid_argument("x rows must have " + std::to_string(T) + " values");
        }
        for (std::size_t t = 0; t < T; ++t) x[c * T + t] = row[t].get<double>();
    }
    return x;
}

void write_all(int fd, const std::string& s) {
    std::size_t off = 0;
    while (off < s.size()) {
        const ssize_t n = ::write(fd, s.data() + off, s.size() - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw std::runtime_error(std::string("external black box: write failed: ") + std::strerror(errno));
        }
        off += static_cast<std::size_t>(n);
    }
}

}  // namespace

void serve(const BlackBox& f, std::istream& in, std::ostream& out) {
    out << handshake(f).dump() << '\n' << std::flush;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json resp;
        try {
            const json req = json::parse(line);
            resp["id"] = req.at("id");
            const Tensor y = f.predict(parse_instance(req.at("x"), f.channels(), f.length()));
            resp["y"] = std::vector<double>(y.values().begin(), y.values().end());
        } catch (const std::exception& e) {
            resp["error"] = e.what();
        }
        out << resp.dump() << '\n' << std::flush;
    }
}

ExternalProcess::ExternalProcess(std::vector<std::string> argv, bool fd_fallback, double fd_step)
    : argv_(std::move(argv)), fd_fallback_(fd_fallback), fd_step_(fd_step) {
    if (argv_.empty()) throw std::invalid_argument("external black box needs a command");
    std::signal(SIGPIPE, SIG_IGN);
    int in_pipe[2], out_pipe[2];
    if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0) throw std::runtime_error("external black box: pipe failed");
    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    posix_spawn_file_actions_adddup2(&fa, in_pipe[0], 0);
    posix_spawn_file_actions_adddup2(&fa, out_pipe[1], 1);
    posix_spawn_file_actions_addclose(&fa, in_pipe[1]);
    posix_spawn_file_actions_addclose(&fa, out_pipe[0]);
    std::vector<char*> args;
    for (auto& a : argv_) args.push_back(a.data());
    args.push_back(nullptr);
    pid_t pid = 0;
    const int rc = posix_spawnp(&pid, args[0], &fa, nullptr, args.data(), environ);
    posix_spawn_file_actions_destroy(&fa);
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    if (rc != 0) {
        ::close(in_pipe[1]);
        ::close(out_pipe[0]);
        throw std::runtime_error("external black box: cannot start '" + argv_[0] + "': " + std::strerror(rc));
    }
    pid_ = pid;
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];

    const json hs = json::parse(roundtrip(""));
    if (hs.value("type", "") != "handshake") throw std::runtime_error("external black box: missing handshake");
    mode_ = output_mode_from_name(hs.at("output_mode").get<std::string>());
    D_ = hs.at("input_shape").at(0).get<std::size_t>();
    T_ = hs.at("input_shape").at(1).get<std::size_t>();
    K_ = hs.value("output_dim", mode_ == OutputMode::ScalarRegression ? std::size_t{1} : std::size_t{0});
    if (D_ == 0 || T_ == 0 || K_ == 0) throw std::runtime_error("external black box: invalid handshake shape");
    checksum_ = io::fnv1a(hs.dump());

    fn_ = std::make_shared<ExternalFunction>();
    fn_->name = "external:" + argv_[0];
    fn_->forward = [this](const Tensor& x) { return predict_batch(x); };
    fn_->vjp = [this](const Tensor& x, const Tensor&, const Tensor& gy) { return fd_vjp(x, gy); };
}

ExternalProcess::~ExternalProcess() {
    if (to_child_ >= 0) ::close(to_child_);
    if (from_child_ >= 0) ::close(from_child_);
    if (pid_ > 0) {
        int status = 0;
        ::waitpid(pid_, &status, 0);
    }
}

std::string ExternalProcess::roundtrip(const std::string& line) const {
    if (!line.empty()) write_all(to_child_, line + "\n");
    for (;;) {
        const auto nl = buffer_.find('\n');
        if (nl != std::string::npos) {
            std::string out = buffer_.substr(0, nl);
            buffer_.erase(0, nl + 1);
            return out;
        }
        char chunk[65536];
        const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) throw std::runtime_error("external black box '" + argv_[0] + "' closed its output");
        buffer_.append(chunk, static_cast<std::size_t>(n));
    }
}

Tensor ExternalProcess::predict_batch(const Tensor& x) const {
    check_input(x, true);
    const std::size_t B = x.dim(0);
    Tensor y({B, K_});
    for (std::size_t b = 0; b < B; ++b) {
        json rows = json::array();
        for (std::size_t c = 0; c < D_; ++c) {
            const double* p = x.values().data() + (b * D_ + c) * T_;
            rows.push_back(std::vector<double>(p, p + T_));
        }
        const std::uint64_t id = next_id_++;
        const json resp = json::parse(roundtrip(json{{"id", id}, {"x", rows}}.dump()));
        if (resp.contains("error")) throw std::runtime_error("external black box error: " + resp["error"].get<std::string>());
        if (resp.at("id").get<std::uint64_t>() != id) throw std::runtime_error("external black box: response id mismatch");
        const auto& yj = resp.at("y");
        if (yj.size() != K_) throw std::runtime_error("external black box: wrong output length");
        for (std::size_t k = 0; k < K_; ++k) y[b * K_ + k] = yj[k].get<double>();
    }
    return y;
}

Tensor ExternalProcess::fd_vjp(const Tensor& x, const Tensor& grad_y) const {
    const std::size_t B = x.dim(0), n = D_ * T_;
    Tensor gx(x.shape(), 0.0);
    Tensor xp = x;
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t b = 0; b < B; ++b) xp[b * n + j] = x[b * n + j] + fd_step_;
        const Tensor up = predict_batch(xp);
        for (std::size_t b = 0; b < B; ++b) xp[b * n + j] = x[b * n + j] - fd_step_;
        const Tensor down = predict_batch(xp);
        for (std::size_t b = 0; b < B; ++b) {
            xp[b * n + j] = x[b * n + j];
            double acc = 0;
            for (std::size_t k = 0; k < K_; ++k) acc += grad_y[b * K_ + k] * (up[b * K_ + k] - down[b * K_ + k]);
            gx[b * n + j] = acc / (2.0 * fd_step_);
        }
    }
    return gx;
}

NodeId ExternalProcess::apply(Graph& g, NodeId x) const {
    if (!fd_fallback_) {
        throw std::runtime_error("external black box '" + argv_[0] +
                                 "' exposes no gradients; enable the finite-difference fallback");
    }
    return g.external(x, fn_);
}

}  // namespace tsae::bb
