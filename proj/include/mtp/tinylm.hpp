#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "mtp/common.hpp"
#include "mtp/textgen.hpp"

namespace mtp {

template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

struct ParamSpec {
    std::string name;
    /// Rank-1 tensors (norm gains) are stored as 1 x n matrices.
    std::vector<std::size_t> shape;

    std::size_t rows() const { return shape.size() == 1 ? 1 : shape[0]; }
    std::size_t cols() const { return shape.back(); }
    std::size_t numel() const { return rows() * cols(); }
};

/// Decoder-only transformer hyperparameters.
///
/// Pre-norm blocks with RMSNorm, rotary position encoding on queries and keys,
/// causal multi-head attention, and a gated SiLU MLP. Tensor names follow
/// `embed`, `layer.{i}.attn.{norm,q,k,v,o}`, `layer.{i}.mlp.{norm,gate,up,down}`,
/// `final_norm`, `head`. Weight matrices are stored as (out, in).
struct ModelConfig {
    std::size_t vocab_size = 122;
    std::size_t d_model = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t max_seq_len = 128;

    void validate() const;
    std::vector<ParamSpec> layout() const;
    std::size_t parameter_count() const;
    std::size_t head_dim() const { return d_model / n_heads; }

    bool operator==(const ModelConfig&) const = default;
};

enum class ModelProvenance { base, clean_trained, poisoned, recovering, recovered };

std::string_view to_string(ModelProvenance p);
ModelProvenance model_provenance_from_string(std::string_view s);

struct CheckpointMeta {
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    ModelProvenance provenance = ModelProvenance::base;

    bool operator==(const CheckpointMeta&) const = default;
};

/// Full named-tensor state of a model. Tensor order is the layout order.
template <class Scalar>
class BasicCheckpoint {
public:
    using Tensor = Matrix<Scalar>;

    BasicCheckpoint() = default;
    /// All tensors zero-filled with the layout's shapes.
    explicit BasicCheckpoint(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    std::size_t size() const { return tensors_.size(); }
    const std::vector<ParamSpec>& layout() const { return layout_; }
    const std::string& name(std::size_t i) const { return layout_[i].name; }

    Tensor& tensor(std::size_t i) { return tensors_[i]; }
    const Tensor& tensor(std::size_t i) const { return tensors_[i]; }
    Tensor& operator[](std::string_view name) { return tensors_[index_of(name)]; }
    const Tensor& operator[](std::string_view name) const { return tensors_[index_of(name)]; }

    std::optional<std::size_t> find(std::string_view name) const;
    /// Throws when the name is not part of the layout.
    std::size_t index_of(std::string_view name) const;

    std::vector<Tensor>& tensors() { return tensors_; }
    const std::vector<Tensor>& tensors() const { return tensors_; }

    template <class Other>
    BasicCheckpoint<Other> cast() const {
        BasicCheckpoint<Other> out(config_);
        for (std::size_t i = 0; i < tensors_.size(); ++i) out.tensor(i) = tensors_[i].template cast<Other>();
        out.meta = meta;
        return out;
    }

    CheckpointMeta meta;

private:
    ModelConfig config_;
    std::vector<ParamSpec> layout_;
    std::vector<Tensor> tensors_;
};

using Checkpoint = BasicCheckpoint<float>;

/// True when configs match and every tensor is equal bit for bit.
template <class Scalar>
bool tensors_bit_equal(const BasicCheckpoint<Scalar>& a, const BasicCheckpoint<Scalar>& b);

template <class Scalar>
using Gradients = std::vector<Matrix<Scalar>>;

/// One rendered prompt and the token expected after it.
struct TrainingSample {
    TokenSequence tokens;
    TokenId target = 0;
};

template <class Scalar>
struct LossAndGrad {
    Scalar loss{};
    Gradients<Scalar> grads;
};

/// Scaled-uniform matrices (bound 1/sqrt(fan_in), embeddings bound 1) and
/// unit norm gains.
Checkpoint init_model(const ModelConfig& config, std::uint64_t seed);

/// Logits at the final position.
template <class Scalar>
RowVector<Scalar> forward(const BasicCheckpoint<Scalar>& ckpt, std::span<const TokenId> seq);

/// Logits at every position, one row per token.
template <class Scalar>
Matrix<Scalar> forward_all(const BasicCheckpoint<Scalar>& ckpt, std::span<const TokenId> seq);

/// Mean cross-entropy of each sample's target at its final position, with
/// exact gradients for every tensor (in layout order).
template <class Scalar>
LossAndGrad<Scalar> loss_and_grad(const BasicCheckpoint<Scalar>& ckpt, std::span<const TrainingSample> batch);

template <class Scalar>
Scalar loss_only(const BasicCheckpoint<Scalar>& ckpt, std::span<const TrainingSample> batch);

enum class Optimizer { sgd, adam };

std::string_view to_string(Optimizer o);
Optimizer optimizer_from_string(std::string_view s);

struct TrainConfig {
    std::size_t epochs = 10;
    double learning_rate = 3e-4;
    std::size_t batch_size = 16;
    Optimizer optimizer = Optimizer::adam;
    std::uint64_t seed = 1;
    /// Names updated by training; every tensor is trainable when unset.
    std::optional<std::set<std::string>> trainable;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    /// Global gradient-norm clip over trainable tensors; 0 disables.
    double clip_norm = 1.0;
    /// Decoupled decay applied to trainable matrices (norm gains excluded).
    double weight_decay = 0.0;

    void validate() const;
};

struct TrainLog {
    std::vector<double> epoch_loss;
};

/// Renders every instance into its inference prompt with the gold label as target.
std::vector<TrainingSample> make_training_samples(const Vocabulary& vocab, const Corpus& corpus);

/// Mini-batch training with a per-epoch shuffle seeded from `tcfg.seed`.
/// Returns a new checkpoint; tensors outside the trainable set are untouched.
Checkpoint train(const Checkpoint& ckpt, std::span<const TrainingSample> samples, const TrainConfig& tcfg,
                 TrainLog* log = nullptr);
Checkpoint train(const Checkpoint& ckpt, const Vocabulary& vocab, const Corpus& corpus, const TrainConfig& tcfg,
                 TrainLog* log = nullptr);

/// Argmax of the final-position logits restricted to `labels`; ties go to the
/// lowest token id.
template <class Scalar>
TokenId predict_label(const BasicCheckpoint<Scalar>& ckpt, std::span<const TokenId> seq,
                      std::span<const TokenId> labels);

/// Restricted argmax over precomputed logits.
template <class Scalar>
TokenId restricted_argmax(const RowVector<Scalar>& logits, std::span<const TokenId> labels);

}  // namespace mtp
