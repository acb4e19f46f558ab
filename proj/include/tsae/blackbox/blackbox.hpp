#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "tsae/data/dataset.hpp"
#include "tsae/numerics/graph.hpp"
#include "tsae/numerics/params.hpp"

namespace tsae::bb {

enum class Kind { InternalTcn, InternalMlp, InternalLinear, ExternalProcess };
enum class OutputMode { ClassProbabilities, ScalarRegression };

std::string kind_name(Kind k);
Kind kind_from_name(const std::string& s);
std::string output_mode_name(OutputMode m);
OutputMode output_mode_from_name(const std::string& s);

/// The predictor being explained. Explanation code only sees outputs (and, through
/// apply(), a differentiable path from inputs to outputs).
class BlackBox {
public:
    virtual ~BlackBox() = default;

    virtual Kind kind() const = 0;
    virtual OutputMode output_mode() const = 0;
    virtual std::size_t channels() const = 0;
    virtual std::size_t length() const = 0;
    /// Number of classes, or 1 for regression.
    virtual std::size_t output_dim() const = 0;

    /// x [B,D,T] -> [B,K]; probabilities in class mode.
    virtual Tensor predict_batch(const Tensor& x) const = 0;
    /// Appends f to a graph; gradients flow to x but never to f's parameters.
    virtual NodeId apply(Graph& g, NodeId x) const = 0;
    virtual std::uint64_t checksum() const = 0;

    /// x [D,T] -> [K]
    Tensor predict(const Tensor& x) const;
    /// Gradient of output coordinate `output` with respect to x [D,T].
    Tensor predict_grad(const Tensor& x, std::size_t output) const;
    /// Scalar used by causal and saliency code: the probability of `cls` (class mode) or the prediction.
    double scalar_output(const Tensor& y, std::size_t cls) const;

    void check_input(const Tensor& x, bool batched) const;
};

struct BlackBoxConfig {
    Kind kind = Kind::InternalTcn;
    std::size_t tcn_channels = 32;
    std::size_t kernel = 3;
    std::vector<std::size_t> dilations{1, 2, 4};
    std::size_t mlp_hidden = 64;
    double lr = 1e-3;
    std::size_t batch_size = 64;
    std::size_t epochs = 30;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    double qualify_accuracy = 0.9;
};

/// Internal TCN, MLP or linear predictor with its own parameters.
class InternalModel final : public BlackBox {
public:
    InternalModel(const BlackBoxConfig& cfg, std::size_t D, std::size_t T, std::size_t n_classes);

    Kind kind() const override { return cfg_.kind; }
    OutputMode output_mode() const override {
        return classes_ == 0 ? OutputMode::ScalarRegression : OutputMode::ClassProbabilities;
    }
    std::size_t channels() const override { return D_; }
    std::size_t length() const override { return T_; }
    std::size_t output_dim() const override { return classes_ == 0 ? 1 : classes_; }
    Tensor predict_batch(const Tensor& x) const override;
    NodeId apply(Graph& g, NodeId x) const override;
    std::uint64_t checksum() const override { return params_.checksum(); }

    /// Forward pass with parameters as graph variables (training).
    NodeId forward(Graph& g, NodeId x, bool trainable) const;
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }
    const BlackBoxConfig& config() const { return cfg_; }
    std::size_t n_classes() const { return classes_; }

    void save(const std::string& path) const;
    static std::unique_ptr<InternalModel> load(const std::string& path);

private:
    BlackBoxConfig cfg_;
    std::size_t D_, T_, classes_;
    ParameterStore params_;
};

struct QualificationReport {
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
    double test_accuracy = 0.0;  // R^2 in regression mode
    double test_loss = 0.0;
    bool qualified = false;
    bool degenerate = false;  // a single class in the training labels
    std::size_t epochs_run = 0;
};

struct TrainedBlackBox {
    std::unique_ptr<InternalModel> model;
    QualificationReport report;
};

/// Trains an internal predictor on split.train, keeps the best-validation parameters and
/// qualifies on split.test.
TrainedBlackBox train_blackbox(const data::Dataset& d, const data::Split& split, const BlackBoxConfig& cfg);

/// Stacks instances into a [B,D,T] tensor.
Tensor stack(const data::Dataset& d, const std::vector<std::size_t>& idx);
Tensor stack(const std::vector<Tensor>& xs);
/// Accuracy (class mode) of f on the selected instances.
double accuracy(const BlackBox& f, const data::Dataset& d, const std::vector<std::size_t>& idx);

/// Serves f over the line-delimited JSON protocol until EOF on `in`.
void serve(const BlackBox& f, std::istream& in, std::ostream& out);

/// Predictor living in a child process that speaks the line-delimited JSON protocol.
class ExternalProcess final : public BlackBox {
public:
    /// argv[0] is resolved through PATH. With fd_fallback=false, apply() and predict_grad fail.
    ExternalProcess(std::vector<std::string> argv, bool fd_fallback = true, double fd_step = 1e-4);
    ~ExternalProcess() override;
    ExternalProcess(const ExternalProcess&) = delete;
    ExternalProcess& operator=(const ExternalProcess&) = delete;

    Kind kind() const override { return Kind::ExternalProcess; }
    OutputMode output_mode() const override { return mode_; }
    std::size_t channels() const override { return D_; }
    std::size_t length() const override { return T_; }
    std::size_t output_dim() const override { return K_; }
    Tensor predict_batch(const Tensor& x) const override;
    NodeId apply(Graph& g, NodeId x) const override;
    std::uint64_t checksum() const override { return checksum_; }

private:
    std::string roundtrip(const std::string& line) const;
    Tensor fd_vjp(const Tensor& x, const Tensor& grad_y) const;

    std::vector<std::string> argv_;
    bool fd_fallback_;
    double fd_step_;
    int pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;
    mutable std::string buffer_;
    mutable std::uint64_t next_id_ = 0;
    OutputMode mode_ = OutputMode::ClassProbabilities;
    std::size_t D_ = 0, T_ = 0, K_ = 0;
    std::uint64_t checksum_ = 0;
    std::shared_ptr<ExternalFunction> fn_;
};

}  // namespace tsae::bb
