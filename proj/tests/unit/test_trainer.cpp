#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "tsae/train/trainer.hpp"

using namespace tsae;
using namespace tsae::train;

namespace {

struct Fixture {
    data::Dataset data = data::gen_freqshapes(48, 20, 3);
    data::Split split = data::stratified_split(data, 3);
    bb::InternalModel f = [] {
        bb::BlackBoxConfig c;
        c.kind = bb::Kind::InternalMlp;
        c.mlp_hidden = 8;
        c.seed = 1;
        return bb::InternalModel(c, 1, 20, 4);
    }();
};

sae::SAEConfig tiny_sae(sae::Activation act = sae::Activation::JumpRelu) {
    sae::SAEConfig c;
    c.channels = 1;
    c.length = 20;
    c.r = 0.5;
    c.activation = act;
    c.k = 2;
    c.gamma_max = 4;
    c.encoder_width = 8;
    c.tcn_channels = 4;
    c.n_blocks = 1;
    c.decoder_channels = 4;
    c.seed = 2;
    return c;
}

TrainConfig tiny_train(std::size_t epochs) {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = 8;
    c.lr = 3e-3;
    c.seed = 7;
    return c;
}

std::filesystem::path temp_file(const char* name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST_CASE("zero epochs return the initialized model") {
    Fixture fx;
    const TrainResult r = train_sae(fx.data, fx.split, fx.f, tiny_sae(), tiny_train(0));
    CHECK(r.history.empty());
    CHECK(r.best_epoch == 0);
    CHECK(r.model.checksum() == sae::SAEModel(tiny_sae()).checksum());
}

TEST_CASE("training is deterministic and logs every epoch") {
    Fixture fx;
    const TrainResult a = train_sae(fx.data, fx.split, fx.f, tiny_sae(), tiny_train(4));
    const TrainResult b = train_sae(fx.data, fx.split, fx.f, tiny_sae(), tiny_train(4));
    CHECK(a.model.serialize() == b.model.serialize());
    CHECK(history_csv(a.history) == history_csv(b.history));
    REQUIRE(a.history.size() == 4);
    CHECK(a.steps == 4 * 4);  // 33 training instances in batches of 8, the last 1 merged
    for (const auto& e : a.history) {
        CHECK(e.evaluated);
        for (double v : {e.train.total, e.train.recon, e.val.total, e.val.cc, e.val.cf, e.val.l0}) CHECK(std::isfinite(v));
    }
    const double best = a.history[a.best_epoch - 1].val.total;
    CHECK(best <= a.history.back().val.total);
    for (const auto& e : a.history) CHECK(best <= e.val.total);

    const Tensor& M = a.model.dictionary();
    for (std::size_t r = 0; r < M.dim(0); ++r) {
        double ss = 0;
        for (std::size_t j = 0; j < M.dim(1); ++j) ss += M.at(r, j) * M.at(r, j);
        CHECK(std::abs(std::sqrt(ss) - 1.0) < 1e-12);
    }
    const std::string csv = history_csv(a.history);
    CHECK(csv.starts_with("epoch,split,gamma,recon,sparsity,sae,label_fidelity,cc,cf,total,l0,agreement\n"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 4);
}

TEST_CASE("an interrupted run resumes to the same result") {
    Fixture fx;
    const TrainResult full = train_sae(fx.data, fx.split, fx.f, tiny_sae(), tiny_train(4));

    TrainConfig cfg = tiny_train(4);
    cfg.state_path = temp_file("tsae_resume_state.bin").string();
    std::filesystem::remove(cfg.state_path);
    const TrainResult part =
        train_sae(fx.data, fx.split, fx.f, tiny_sae(), cfg, false, [](const EpochRecord& e) { return e.epoch < 2; });
    CHECK(part.history.size() == 2);
    const TrainResult resumed = train_sae(fx.data, fx.split, fx.f, tiny_sae(), cfg, true);
    CHECK(resumed.history.size() == 4);
    CHECK(resumed.model.serialize() == full.model.serialize());
    CHECK(history_csv(resumed.history) == history_csv(full.history));

    TrainConfig other = cfg;
    other.lr = 1e-2;
    CHECK_THROWS_WITH(train_sae(fx.data, fx.split, fx.f, tiny_sae(), other, true), doctest::Contains("configuration"));
    std::filesystem::remove(cfg.state_path);
}

TEST_CASE("topk runs follow the gamma schedule") {
    Fixture fx;
    const TrainResult r = train_sae(fx.data, fx.split, fx.f, tiny_sae(sae::Activation::TopK), tiny_train(3));
    REQUIRE(r.history.size() == 3);
    CHECK(r.history.front().gamma > 1);
    CHECK(r.history.back().gamma <= 2);
    CHECK(r.history.front().gamma >= r.history.back().gamma);
}

TEST_CASE("non-finite loss aborts with the last good checkpoint") {
    Fixture fx;
    fx.data.items[fx.split.train[5]].x[3] = std::nan("");
    const TrainResult r = train_sae(fx.data, fx.split, fx.f, tiny_sae(), tiny_train(3));
    CHECK(r.aborted);
    CHECK(r.abort_reason.find("non-finite loss") != std::string::npos);
    CHECK(r.model.checksum() == sae::SAEModel(tiny_sae()).checksum());
}

TEST_CASE("configuration checks") {
    Fixture fx;
    TrainConfig bad = tiny_train(1);
    bad.batch_size = 1;
    CHECK_THROWS(train_sae(fx.data, fx.split, fx.f, tiny_sae(), bad));
    bad = tiny_train(1);
    bad.lr = 0;
    CHECK_THROWS(bad.validate());
    const TrainConfig round = train_config_from_json(train_config_to_json(tiny_train(5)));
    CHECK(train_config_to_json(round) == train_config_to_json(tiny_train(5)));
}

TEST_CASE("sweeps run each value and record failures") {
    Fixture fx;
    CHECK(sweep_axis_from_name("lambda") == SweepAxis::Lambda);
    CHECK_THROWS(sweep_axis_from_name("tau"));

    const auto single = sweep(SweepAxis::Eta, {0.1}, fx.data, fx.split, fx.f, tiny_sae(), tiny_train(2));
    REQUIRE(single.size() == 1);
    REQUIRE(single[0].result);
    CHECK(single[0].result->model.serialize() ==
          train_sae(fx.data, fx.split, fx.f, tiny_sae(), tiny_train(2)).model.serialize());

    const auto pts = sweep(SweepAxis::R, {0.0, 0.5}, fx.data, fx.split, fx.f, tiny_sae(), tiny_train(1));
    REQUIRE(pts.size() == 2);
    CHECK_FALSE(pts[0].error.empty());
    CHECK_FALSE(pts[0].result);
    CHECK(pts[1].error.empty());
    CHECK(pts[1].result);

    const auto etas = sweep(SweepAxis::Eta, {0.0, 5.0}, fx.data, fx.split, fx.f, tiny_sae(), tiny_train(3));
    REQUIRE(etas[0].result);
    REQUIRE(etas[1].result);
    CHECK(etas[0].result->model.config().eta == 0.0);
    CHECK(etas[1].result->model.config().eta == 5.0);
    CHECK(etas[0].val.sae == etas[0].val.recon);
    CHECK(etas[1].val.sae == doctest::Approx(etas[1].val.recon + 5.0 * etas[1].val.sparsity));
}
