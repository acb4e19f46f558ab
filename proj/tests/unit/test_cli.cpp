#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "cli/commands.hpp"
#include "cli/config.hpp"
#include "tsae/interpret/interpret.hpp"
#include "tsae/io/binary.hpp"
#include "tsae/metrics/evaluate.hpp"

#include "json.hpp"

namespace fs = std::filesystem;
using namespace tsae;
using nlohmann::json;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("tsae_cli_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& rel) const { return (path / rel).string(); }
};

const char* kTiny = R"([run]
out = run
seed = 4
[dataset]
n = 160
length = 50
[blackbox]
kind = internal-mlp
epochs = 5
require_qualified = false
[sae]
encoder_width = 16
tcn_channels = 4
decoder_channels = 8
n_blocks = 1
[train]
epochs = 2
batch_size = 32
[theorem]
interventions = 10
probe_size = 8
)";

std::string write_config(const TempDir& dir, const std::string& extra = "", const std::string& name = "c.cfg") {
    std::ofstream(dir / name) << kTiny << extra;
    return dir / name;
}

struct Result {
    int rc;
    std::string log;
};

Result run(const std::string& cmd, const std::string& config, bool resume = false) {
    cli::Options o;
    o.config = config;
    o.resume = resume;
    std::istringstream in;
    std::ostringstream out, log;
    const int rc = cli::run_command(cmd, o, in, out, log);
    return {rc, log.str()};
}

std::string slurp(const std::string& p) { return io::read_file(p); }

}  // namespace

TEST_CASE("config parsing rejects unknown keys and resolves paths") {
    TempDir dir("cfg");
    const std::string base = dir.path.string();
    const auto c = cli::parse_config("[run]\nout = sub/run  # comment\nseed = 9\n[sae]\neta = 0.3\n", base);
    CHECK(c.out == (dir.path / "sub/run").lexically_normal().string());
    CHECK(c.seed == 9);
    CHECK(c.sae.seed == 9);
    CHECK(c.train.seed == 9);
    CHECK(c.theorem.seed == 9);
    CHECK(c.sae.eta == 0.3);

    CHECK_THROWS_WITH_AS(cli::parse_config("[sae]\nbogus = 1\n", base), doctest::Contains("unknown key"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(cli::parse_config("[nope]\n", base), doctest::Contains("unknown section"),
                         std::invalid_argument);
    CHECK_THROWS_AS(cli::parse_config("eta = 1\n", base), std::invalid_argument);
    CHECK_THROWS_AS(cli::parse_config("[sae]\neta\n", base), std::invalid_argument);
    CHECK_THROWS_AS(cli::parse_config("[sae]\nk = -3\n", base), std::invalid_argument);
    CHECK_THROWS_AS(cli::parse_config("[sae]\nr = 1.5x\n", base), std::invalid_argument);
    CHECK_THROWS_WITH_AS(cli::parse_config("[dataset]\ncsv_path = missing.csv\n", base),
                         doctest::Contains("does not exist"), std::invalid_argument);
    CHECK_THROWS_AS(cli::parse_config("[blackbox]\nkind = external-process\n", base), std::invalid_argument);
    CHECK_THROWS_AS(cli::parse_config("[blackbox]\ncommand = no-such-binary-xyz\n", base), std::invalid_argument);
    CHECK_THROWS_AS(cli::parse_config("[sae]\nr = 0\n", base), std::invalid_argument);

    std::ofstream(dir / "series.csv") << "a,label\n1,0\n";
    const auto csv = cli::parse_config("[dataset]\ngenerator = csv\ncsv_path = series.csv\n", base);
    CHECK(csv.dataset.csv_path == dir / "series.csv");

    const auto keys = cli::config_keys();
    CHECK(std::find(keys.begin(), keys.end(), "train.lambda") != keys.end());
    CHECK(std::find(keys.begin(), keys.end(), "eval.oracle_saliency") != keys.end());
}

TEST_CASE("TSAE_OUT overrides the output directory") {
    TempDir dir("env");
    const std::string cfg = write_config(dir);
    ::setenv("TSAE_OUT", (dir / "elsewhere").c_str(), 1);
    const auto c = cli::load_config(cfg);
    ::unsetenv("TSAE_OUT");
    CHECK(c.out == dir / "elsewhere");
    CHECK(cli::load_config(cfg).out == dir / "run");
}

TEST_CASE("instance selectors") {
    const auto s = cli::parse_selector("test:0..9", 30);
    CHECK(s.split == "test");
    REQUIRE(s.positions.size() == 10);
    CHECK(s.positions.front() == 0);
    CHECK(s.positions.back() == 9);
    CHECK(cli::parse_selector("val:3,1,4", 5).positions == std::vector<std::size_t>{3, 1, 4});
    CHECK(cli::parse_selector("train:all", 4).positions.size() == 4);
    CHECK_THROWS(cli::parse_selector("test", 5));
    CHECK_THROWS(cli::parse_selector("test:5..2", 10));
    CHECK_THROWS(cli::parse_selector("test:0..9", 5));
    CHECK_THROWS(cli::parse_selector("test:a", 5));
}

TEST_CASE("gen-data is deterministic and handles empty datasets") {
    TempDir dir("gen");
    const std::string cfg = write_config(dir);
    REQUIRE(run("gen-data", cfg).rc == 0);
    const auto first = io::file_checksum(dir / "run/data.bin");
    REQUIRE(run("gen-data", cfg).rc == 0);
    CHECK(io::file_checksum(dir / "run/data.bin") == first);
    CHECK(data::read_cache(dir / "run/data.bin").size() == 160);
    const json manifest = json::parse(slurp(dir / "run/manifest.json"));
    CHECK(manifest["artifacts"]["data.bin"]["fnv1a"] == io::hex64(first));

    const std::string empty = write_config(dir, "[dataset]\nn = 0\n", "empty.cfg");
    const auto r = run("gen-data", empty);
    CHECK(r.rc == 0);
    CHECK(r.log.find("warning") != std::string::npos);
    CHECK(data::read_cache(dir / "run/data.bin").size() == 0);
}

TEST_CASE("missing prerequisites and corrupted checkpoints fail") {
    TempDir dir("missing");
    const std::string cfg = write_config(dir);
    auto r = run("train-blackbox", cfg);
    CHECK(r.rc == 2);
    CHECK(r.log.find("data.bin") != std::string::npos);
    REQUIRE(run("gen-data", cfg).rc == 0);
    r = run("explain", cfg);
    CHECK(r.rc == 2);
    CHECK(r.log.find("blackbox.bin") != std::string::npos);
    REQUIRE(run("train-blackbox", cfg).rc == 0);
    r = run("explain", cfg);
    CHECK(r.rc == 2);
    CHECK(r.log.find("sae.bin") != std::string::npos);

    std::ofstream(dir / "run/sae.bin", std::ios::binary) << "XXXXgarbage";
    r = run("explain", cfg);
    CHECK(r.rc == 2);
    CHECK(r.log.find("bad magic") != std::string::npos);
    std::ofstream(dir / "run/blackbox.bin", std::ios::binary) << "XXXXgarbage";
    r = run("train-sae", cfg);
    CHECK(r.rc == 2);
    CHECK(r.log.find("bad magic") != std::string::npos);
    CHECK(run("no-such-command", cfg).rc == 2);
}

TEST_CASE("qualification gate sets the exit status") {
    TempDir dir("gate");
    const std::string cfg = write_config(dir, "[blackbox]\nrequire_qualified = true\nqualify_accuracy = 1.01\n");
    REQUIRE(run("gen-data", cfg).rc == 0);
    CHECK(run("train-blackbox", cfg).rc == 1);
    CHECK(fs::exists(dir / "run/blackbox_report.json"));
}

TEST_CASE("pipeline artifacts, round trips and idempotency") {
    TempDir dir("pipe");
    const std::string cfg = write_config(dir);
    REQUIRE(run("gen-data", cfg).rc == 0);
    REQUIRE(run("train-blackbox", cfg).rc == 0);
    REQUIRE(run("train-sae", cfg).rc == 0);
    const std::string sae_bytes = slurp(dir / "run/sae.bin");
    const std::string manifest = slurp(dir / "run/manifest.json");
    REQUIRE(run("train-sae", cfg).rc == 0);
    CHECK(slurp(dir / "run/sae.bin") == sae_bytes);
    CHECK(slurp(dir / "run/manifest.json") == manifest);
    CHECK(slurp(dir / "run/history.csv").find("epoch") == 0);

    SUBCASE("explain writes one mask per selected instance and the CSV reloads exactly") {
        REQUIRE(run("explain", cfg).rc == 0);
        std::size_t csvs = 0;
        for (const auto& e : fs::directory_iterator(dir / "run/explain")) csvs += e.path().extension() == ".csv";
        CHECK(csvs == 10);

        auto d = data::read_cache(dir / "run/data.bin");
        const auto split = data::stratified_split(d, 4);
        auto model = sae::SAEModel::load(dir / "run/sae.bin");
        const auto f = bb::InternalModel::load(dir / "run/blackbox.bin");
        causal::SaeConcepts cm(model);
        const auto e = interp::explain(d.items[split.test[3]].x, cm, *f);
        std::istringstream is(slurp(dir / "run/explain/test_3.csv"));
        std::string line;
        std::getline(is, line);
        CHECK(line == "channel,t,score");
        std::size_t k = 0;
        while (std::getline(is, line)) {
            const auto c2 = line.rfind(',');
            const double v = std::strtod(line.c_str() + c2 + 1, nullptr);
            REQUIRE(k < e.mask.scores.size());
            CHECK(v == e.mask.scores[k]);
            ++k;
        }
        CHECK(k == e.mask.scores.size());
    }

    SUBCASE("evaluate reports every field, a random control and the oracle mask") {
        REQUIRE(run("evaluate", cfg).rc == 0);
        const json r = json::parse(slurp(dir / "run/eval_report.json"));
        for (const char* key : {"instances", "scored_instances", "auprc", "aup", "aur", "random_auprc", "random_aup",
                                "random_aur", "auprc_t", "fx_mean", "fx_std", "fx_no_active", "kl", "kde_ll", "mmd",
                                "mmd_raw", "mmd_bandwidth_fallback", "agreement", "recon_mse", "mean_l0"}) {
            CHECK_MESSAGE(r.contains(key), key);
        }
        const std::string lb = slurp(dir / "run/leaderboard.csv");
        CHECK(lb.find("\nrandom,") != std::string::npos);

        const std::string oracle = write_config(dir, "[eval]\noracle_saliency = true\n", "oracle.cfg");
        REQUIRE(run("evaluate", oracle).rc == 0);
        const json o = json::parse(slurp(dir / "run/eval_report.json"));
        CHECK(o["auprc"].get<double>() == 1.0);
        CHECK(slurp(dir / "run/leaderboard.csv").find("oracle-mask,1,") != std::string::npos);
    }

    SUBCASE("random-control AUPRC matches the expected precision of a random ranking") {
        // Per-instance average precision of uniformly random scores has expectation
        // ((m-1)/(n-1) * (n - H_n) + H_n) / n for m positives among n cells, which sits above
        // the prevalence m/n when m is small.
        auto d = data::read_cache(dir / "run/data.bin");
        const auto split = data::stratified_split(d, 4);
        auto model = sae::SAEModel::load(dir / "run/sae.bin");
        const auto f = bb::InternalModel::load(dir / "run/blackbox.bin");
        causal::SaeConcepts cm(model);
        double expected = 0, prevalence = 0;
        std::size_t scored = 0;
        for (auto i : split.test) {
            const auto& it = d.items[i];
            double m = 0;
            for (double v : it.gt_mask.values()) m += v;
            if (!it.has_mask || m == 0) continue;
            const double n = static_cast<double>(it.gt_mask.size());
            double harmonic = 0;
            for (std::size_t k = 1; k <= it.gt_mask.size(); ++k) harmonic += 1.0 / static_cast<double>(k);
            expected += ((m - 1) / (n - 1) * (n - harmonic) + harmonic) / n;
            prevalence += m / n;
            ++scored;
        }
        expected /= static_cast<double>(scored);
        prevalence /= static_cast<double>(scored);
        double random = 0;
        for (std::uint64_t s = 0; s < 10; ++s) {
            metrics::EvalOptions o;
            o.seed = s;
            random += metrics::evaluate(cm, *f, d, split.test, o).random_auprc;
        }
        random /= 10;
        CHECK(std::abs(random - expected) <= 0.02);
        CHECK(random > prevalence);
        MESSAGE("random " << random << " expected " << expected << " prevalence " << prevalence);
    }

    SUBCASE("counterfactual and theorem reports") {
        REQUIRE(run("counterfactual", cfg).rc == 0);
        const json c = json::parse(slurp(dir / "run/counterfactual/test_0.json"));
        CHECK(c["delta_c"].size() == sae::SAEModel::load(dir / "run/sae.bin").d());
        CHECK(c["x_cf"].size() == 1);

        REQUIRE(run("validate-theorem", cfg).rc == 0);
        CHECK(json::parse(slurp(dir / "run/theorem.json")).contains("spearman"));
        const std::string oracle = write_config(dir, "[theorem]\noracle = true\n", "oracle.cfg");
        REQUIRE(run("validate-theorem", oracle).rc == 0);
        const json t = json::parse(slurp(dir / "run/theorem.json"));
        CHECK(t["spearman"].get<double>() == doctest::Approx(1.0));
        CHECK(t["ordering_fraction"].get<double>() == 1.0);
    }

    SUBCASE("fx-correlation needs five checkpoints") {
        const std::string three = write_config(dir, "[sweep]\nvalues = 0, 0.1, 0.2\n", "three.cfg");
        REQUIRE(run("sweep", three).rc == 0);
        const auto r = run("fx-correlation", three);
        CHECK(r.rc == 2);
        CHECK(r.log.find("at least 5") != std::string::npos);

        const std::string five = write_config(dir, "[sweep]\nvalues = 0, 0.1, 0.2, 0.4, 0.8\n", "five.cfg");
        REQUIRE(run("sweep", five).rc == 0);
        REQUIRE(run("fx-correlation", five).rc == 0);
        const json j = json::parse(slurp(dir / "run/fx_correlation.json"));
        CHECK(j["points"].size() == 5);
        CHECK(j.contains("spearman"));
        CHECK(slurp(dir / "run/sweep.csv").find("axis,value,measure,measurement") == 0);
    }
}

TEST_CASE("resume continues an interrupted run to the same checkpoint") {
    TempDir dir("resume");
    const std::string cfg = write_config(dir, "[train]\nepochs = 3\n");
    REQUIRE(run("gen-data", cfg).rc == 0);
    REQUIRE(run("train-blackbox", cfg).rc == 0);
    REQUIRE(run("train-sae", cfg).rc == 0);
    const std::string uninterrupted = slurp(dir / "run/sae.bin");
    const std::string full_history = slurp(dir / "run/history.csv");

    // Interrupt after the first epoch by driving the trainer directly on the same state file.
    const auto c = cli::load_config(cfg);
    auto d = data::read_cache(dir / "run/data.bin");
    const auto split = data::stratified_split(d, c.seed);
    const auto f = bb::InternalModel::load(dir / "run/blackbox.bin");
    sae::SAEConfig s = c.sae;
    s.channels = d.channels;
    s.length = d.length;
    train::TrainConfig t = c.train;
    t.state_path = dir / "run/train_state.bin";
    fs::remove(t.state_path);
    const auto partial = train::train_sae(d, split, *f, s, t, false, [](const train::EpochRecord&) { return false; });
    REQUIRE(partial.history.size() == 1);

    REQUIRE(run("train-sae", cfg, true).rc == 0);
    CHECK(slurp(dir / "run/sae.bin") == uninterrupted);
    CHECK(slurp(dir / "run/history.csv") == full_history);
}

TEST_CASE("external adapter matches the internal model it serves") {
    TempDir dir("serve");
    bb::BlackBoxConfig bc;
    bc.kind = bb::Kind::InternalTcn;
    bc.tcn_channels = 4;
    bc.seed = 3;
    bb::InternalModel m(bc, 2, 12, 3);
    m.save(dir / "bb.bin");
    bb::ExternalProcess ext({TSAE_TOOL_PATH, "serve-blackbox", "--model", dir / "bb.bin"});
    CHECK(ext.channels() == 2);
    CHECK(ext.length() == 12);
    CHECK(ext.output_dim() == 3);
    CHECK(ext.checksum() != 0);
    Rng rng(5);
    Tensor x({4, 2, 12});
    for (double& v : x.values()) v = rng.normal();
    const Tensor a = m.predict_batch(x), b = ext.predict_batch(x);
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    CHECK(worst <= 1e-9);
}
