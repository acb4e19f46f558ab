#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "tsae/blackbox/blackbox.hpp"
#include "tsae/numerics/finite_diff.hpp"
#include "tsae/numerics/rng.hpp"

using namespace tsae;
using namespace tsae::bb;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("tsae_test_" + name)).string();
}

Tensor random_series(std::size_t D, std::size_t T, Rng& rng) {
    Tensor x({D, T});
    for (double& v : x.values()) v = rng.normal();
    return x;
}

}  // namespace

TEST_CASE("internal models output probability vectors deterministically") {
    for (Kind k : {Kind::InternalTcn, Kind::InternalMlp, Kind::InternalLinear}) {
        BlackBoxConfig cfg;
        cfg.kind = k;
        cfg.tcn_channels = 8;
        InternalModel m(cfg, 2, 20, 3);
        Rng rng(1);
        const Tensor x = random_series(2, 20, rng);
        const Tensor y = m.predict(x);
        CHECK(y.shape() == Shape{3});
        CHECK(std::abs(std::accumulate(y.values().begin(), y.values().end(), 0.0) - 1.0) < 1e-9);
        CHECK(m.predict(x) == y);
        CHECK_THROWS_AS(m.predict(Tensor({2, 21})), std::invalid_argument);
    }
}

TEST_CASE("predict_grad matches finite differences") {
    BlackBoxConfig cfg;
    cfg.tcn_channels = 6;
    InternalModel m(cfg, 2, 12, 3);
    Rng rng(4);
    const Tensor x = random_series(2, 12, rng);
    const Tensor g = m.predict_grad(x, 1);
    const auto numeric = finite_diff_gradient(
        [&](const ParamMap& p) { return m.predict(p.at("x"))[1]; }, ParamMap{{"x", x}}, 1e-6);
    const GradCheck r = compare_gradients(Gradients{{"x", g}}, numeric);
    INFO("worst " << r.worst << " rel " << r.max_rel_err);
    CHECK(r.ok);

    // identical inputs in a batch give identical gradients
    Graph gr;
    const NodeId xb = gr.variable("x", stack(std::vector<Tensor>{x, x}));
    const NodeId y = m.apply(gr, xb);
    const auto grads = gr.backward(gr.sum(gr.slice(y, 1, 1, 2)));
    const Tensor& gx = grads.at("x");
    for (std::size_t i = 0; i < 24; ++i) CHECK(gx[i] == gx[24 + i]);
}

TEST_CASE("constant-output predictor has zero input gradient") {
    BlackBoxConfig cfg;
    cfg.kind = Kind::InternalLinear;
    InternalModel m(cfg, 1, 8, 0);
    for (double& w : m.params().get("head.w").values()) w = 0.0;
    m.params().get("head.b")[0] = 3.0;
    Rng rng(2);
    const Tensor g = m.predict_grad(random_series(1, 8, rng), 0);
    for (double v : g.values()) CHECK(v == 0.0);
    CHECK(m.output_mode() == OutputMode::ScalarRegression);
}

TEST_CASE("training qualifies on FreqShapes and checkpoints round trip") {
    const auto d = data::gen_freqshapes(1200, 50, 3);
    const auto split = data::stratified_split(d, 3);
    BlackBoxConfig cfg;
    cfg.epochs = 20;
    cfg.lr = 3e-3;
    cfg.seed = 3;
    auto trained = train_blackbox(d, split, cfg);
    INFO("test accuracy " << trained.report.test_accuracy);
    CHECK(trained.report.test_accuracy >= 0.9);
    CHECK(trained.report.qualified);
    CHECK_FALSE(trained.report.degenerate);

    const std::string path = temp_path("bb.tsbb");
    trained.model->save(path);
    auto loaded = InternalModel::load(path);
    CHECK(loaded->checksum() == trained.model->checksum());
    CHECK(loaded->predict(d.items[0].x) == trained.model->predict(d.items[0].x));
    std::filesystem::remove(path);
}

TEST_CASE("degenerate and empty training sets") {
    auto d = data::gen_freqshapes(40, 30, 1);
    for (auto& it : d.items) it.y = 0;
    const auto split = data::stratified_split(d, 1);
    BlackBoxConfig cfg;
    cfg.epochs = 30;
    cfg.lr = 1e-2;
    cfg.tcn_channels = 4;
    const auto t = train_blackbox(d, split, cfg);
    CHECK(t.report.degenerate);
    CHECK(t.report.test_accuracy == 1.0);

    data::Dataset empty;
    empty.channels = 1;
    empty.length = 30;
    empty.n_classes = 4;
    CHECK_THROWS(train_blackbox(empty, data::Split{}, cfg));
}

TEST_CASE("serve speaks the line protocol") {
    BlackBoxConfig cfg;
    cfg.kind = Kind::InternalMlp;
    InternalModel m(cfg, 1, 5, 2);
    std::istringstream in("{\"id\":7,\"x\":[[1,2,3,4,5]]}\n{\"id\":8,\"x\":[[1,2]]}\n");
    std::ostringstream out;
    serve(m, in, out);
    std::istringstream lines(out.str());
    std::string hs, r1, r2;
    std::getline(lines, hs);
    std::getline(lines, r1);
    std::getline(lines, r2);
    CHECK(hs.find("\"output_mode\":\"class-probabilities\"") != std::string::npos);
    CHECK(r1.find("\"id\":7") != std::string::npos);
    CHECK(r1.find("\"y\"") != std::string::npos);
    CHECK(r2.find("\"error\"") != std::string::npos);
}
