#include "mtp/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace mtp {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kRopeBase = 10000.0;

// Offsets of a block's tensors relative to its first tensor.
enum BlockSlot : std::size_t {
    kAttnNorm = 0,
    kQuery,
    kKey,
    kValue,
    kAttnOut,
    kMlpNorm,
    kGate,
    kUp,
    kDown,
    kSlotsPerLayer
};

constexpr std::size_t kEmbed = 0;
std::size_t slot(std::size_t layer, BlockSlot s) { return 1 + layer * kSlotsPerLayer + s; }
std::size_t final_norm_slot(const ModelConfig& cfg) { return 1 + cfg.n_layers * kSlotsPerLayer; }
std::size_t head_slot(const ModelConfig& cfg) { return 2 + cfg.n_layers * kSlotsPerLayer; }

template <class S>
using Mat = Matrix<S>;
template <class S>
using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <class S>
void rms_forward(const Mat<S>& x, const Mat<S>& gain, Mat<S>& y, ColVec<S>& r) {
    const S d = static_cast<S>(x.cols());
    r = ((x.array().square().rowwise().sum() / d) + static_cast<S>(kNormEps)).rsqrt().matrix();
    y = (x.array().colwise() * r.array()).matrix();
    y.array().rowwise() *= gain.row(0).array();
}

// Accumulates into dx and dgain.
template <class S>
void rms_backward(const Mat<S>& dy, const Mat<S>& x, const Mat<S>& gain, const ColVec<S>& r, Mat<S>& dx,
                  Mat<S>& dgain) {
    const S d = static_cast<S>(x.cols());
    Mat<S> xhat = (x.array().colwise() * r.array()).matrix();
    dgain.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    Mat<S> dxhat = (dy.array().rowwise() * gain.row(0).array()).matrix();
    ColVec<S> proj = (dxhat.array() * xhat.array()).rowwise().sum().matrix() / d;
    dx += ((dxhat.array() - xhat.array().colwise() * proj.array()).colwise() * r.array()).matrix();
}

template <class S>
struct RopeTables {
    Mat<S> cos, sin;  // T x head_dim/2
};

template <class S>
RopeTables<S> rope_tables(std::size_t T, std::size_t head_dim) {
    const std::size_t pairs = head_dim / 2;
    RopeTables<S> t{Mat<S>(T, pairs), Mat<S>(T, pairs)};
    for (std::size_t j = 0; j < pairs; ++j) {
        const double freq = std::pow(kRopeBase, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
        for (std::size_t p = 0; p < T; ++p) {
            const double angle = static_cast<double>(p) * freq;
            t.cos(p, j) = static_cast<S>(std::cos(angle));
            t.sin(p, j) = static_cast<S>(std::sin(angle));
        }
    }
    return t;
}

// Rotates each (2j, 2j+1) column pair of every head; inverse applies the transpose.
template <class S>
void rope_apply(Mat<S>& m, std::size_t n_heads, std::size_t head_dim, const RopeTables<S>& t, bool inverse) {
    const std::size_t pairs = head_dim / 2;
    const S sign = inverse ? S(-1) : S(1);
    for (Eigen::Index p = 0; p < m.rows(); ++p) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            for (std::size_t j = 0; j < pairs; ++j) {
                const auto c0 = static_cast<Eigen::Index>(h * head_dim + 2 * j);
                const S c = t.cos(p, j);
                const S s = sign * t.sin(p, j);
                const S a = m(p, c0);
                const S b = m(p, c0 + 1);
                m(p, c0) = a * c - b * s;
                m(p, c0 + 1) = a * s + b * c;
            }
        }
    }
}

template <class S>
void causal_softmax(Mat<S>& scores) {
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        auto row = scores.row(i);
        const S mx = row.head(i + 1).maxCoeff();
        row.head(i + 1) = (row.head(i + 1).array() - mx).exp().matrix();
        row.head(i + 1) /= row.head(i + 1).sum();
        row.tail(scores.cols() - i - 1).setZero();
    }
}

template <class S>
struct LayerCache {
    Mat<S> x_in, a, q, k, v, o, x_mid, b, g, u, h;
    ColVec<S> r1, r2;
    std::vector<Mat<S>> p;
};

template <class S>
struct ForwardCache {
    std::vector<LayerCache<S>> layers;
    Mat<S> x_out;  // residual stream after the last block
    ColVec<S> rf;
    Mat<S> z;      // final-normed rows fed to the head
};

template <class S>
Mat<S> run_forward(const BasicCheckpoint<S>& ck, std::span<const TokenId> seq, ForwardCache<S>* cache,
                   bool all_positions) {
    const ModelConfig& cfg = ck.config();
    if (seq.empty()) throw InvalidArgument("forward: empty sequence");
    if (seq.size() > cfg.max_seq_len) {
        throw InvalidArgument("forward: sequence length " + std::to_string(seq.size()) + " exceeds max_seq_len " +
                              std::to_string(cfg.max_seq_len));
    }
    const auto T = static_cast<Eigen::Index>(seq.size());
    const std::size_t H = cfg.n_heads;
    const std::size_t dh = cfg.head_dim();
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    Mat<S> x(T, static_cast<Eigen::Index>(cfg.d_model));
    const auto& embed = ck.tensor(kEmbed);
    for (Eigen::Index t = 0; t < T; ++t) {
        const TokenId tok = seq[static_cast<std::size_t>(t)];
        if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab_size) {
            throw InvalidArgument("forward: token id " + std::to_string(tok) + " outside vocabulary");
        }
        x.row(t) = embed.row(tok);
    }
    const RopeTables<S> rope = rope_tables<S>(seq.size(), dh);

    LayerCache<S> scratch;
    if (cache) cache->layers.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerCache<S>& c = cache ? cache->layers[l] : scratch;
        c.x_in = x;
        rms_forward(x, ck.tensor(slot(l, kAttnNorm)), c.a, c.r1);
        c.q = c.a * ck.tensor(slot(l, kQuery)).transpose();
        c.k = c.a * ck.tensor(slot(l, kKey)).transpose();
        c.v = c.a * ck.tensor(slot(l, kValue)).transpose();
        rope_apply(c.q, H, dh, rope, false);
        rope_apply(c.k, H, dh, rope, false);
        c.o.resize(T, x.cols());
        c.p.resize(H);
        for (std::size_t h = 0; h < H; ++h) {
            const auto off = static_cast<Eigen::Index>(h * dh);
            const auto w = static_cast<Eigen::Index>(dh);
            c.p[h] = (c.q.middleCols(off, w) * c.k.middleCols(off, w).transpose()) * scale;
            causal_softmax(c.p[h]);
            c.o.middleCols(off, w) = c.p[h] * c.v.middleCols(off, w);
        }
        x += c.o * ck.tensor(slot(l, kAttnOut)).transpose();
        c.x_mid = x;
        rms_forward(x, ck.tensor(slot(l, kMlpNorm)), c.b, c.r2);
        c.g = c.b * ck.tensor(slot(l, kGate)).transpose();
        c.u = c.b * ck.tensor(slot(l, kUp)).transpose();
        c.h = (c.g.array() / ((-c.g.array()).exp() + S(1)) * c.u.array()).matrix();
        x += c.h * ck.tensor(slot(l, kDown)).transpose();
    }

    Mat<S> rows = all_positions ? x : Mat<S>(x.bottomRows(1));
    Mat<S> z;
    ColVec<S> rf;
    rms_forward(rows, ck.tensor(final_norm_slot(cfg)), z, rf);
    Mat<S> logits = z * ck.tensor(head_slot(cfg)).transpose();
    if (cache) {
        cache->x_out = std::move(rows);
        cache->rf = std::move(rf);
        cache->z = std::move(z);
    }
    return logits;
}

// Backpropagates d(loss)/d(final logits) into `g`, which must be zeroed.
template <class S>
void run_backward(const BasicCheckpoint<S>& ck, std::span<const TokenId> seq, const ForwardCache<S>& c,
                  const RowVector<S>& dlogits, Gradients<S>& g) {
    const ModelConfig& cfg = ck.config();
    const auto T = static_cast<Eigen::Index>(seq.size());
    const std::size_t H = cfg.n_heads;
    const std::size_t dh = cfg.head_dim();
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    const RopeTables<S> rope = rope_tables<S>(seq.size(), dh);

    const auto& head = ck.tensor(head_slot(cfg));
    g[head_slot(cfg)].noalias() += dlogits.transpose() * c.z;
    Mat<S> dz = dlogits * head;
    Mat<S> dlast = Mat<S>::Zero(1, static_cast<Eigen::Index>(cfg.d_model));
    rms_backward(dz, c.x_out, ck.tensor(final_norm_slot(cfg)), c.rf, dlast, g[final_norm_slot(cfg)]);
    Mat<S> dx = Mat<S>::Zero(T, static_cast<Eigen::Index>(cfg.d_model));
    dx.bottomRows(1) = dlast;

    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const LayerCache<S>& lc = c.layers[li];

        // gated MLP
        const auto& w_down = ck.tensor(slot(li, kDown));
        g[slot(li, kDown)].noalias() += dx.transpose() * lc.h;
        Mat<S> dh_act = dx * w_down;
        auto sig = (S(1) / ((-lc.g.array()).exp() + S(1))).eval();
        Mat<S> du = (dh_act.array() * lc.g.array() * sig).matrix();
        Mat<S> dgate = (dh_act.array() * lc.u.array() * sig * (S(1) + lc.g.array() * (S(1) - sig))).matrix();
        g[slot(li, kGate)].noalias() += dgate.transpose() * lc.b;
        g[slot(li, kUp)].noalias() += du.transpose() * lc.b;
        Mat<S> db = dgate * ck.tensor(slot(li, kGate)) + du * ck.tensor(slot(li, kUp));
        rms_backward(db, lc.x_mid, ck.tensor(slot(li, kMlpNorm)), lc.r2, dx, g[slot(li, kMlpNorm)]);

        // attention
        g[slot(li, kAttnOut)].noalias() += dx.transpose() * lc.o;
        Mat<S> d_o = dx * ck.tensor(slot(li, kAttnOut));
        Mat<S> dq = Mat<S>::Zero(T, dx.cols());
        Mat<S> dk = Mat<S>::Zero(T, dx.cols());
        Mat<S> dv = Mat<S>::Zero(T, dx.cols());
        for (std::size_t h = 0; h < H; ++h) {
            const auto off = static_cast<Eigen::Index>(h * dh);
            const auto w = static_cast<Eigen::Index>(dh);
            const Mat<S>& p = lc.p[h];
            Mat<S> d_oh = d_o.middleCols(off, w);
            Mat<S> dp = d_oh * lc.v.middleCols(off, w).transpose();
            dv.middleCols(off, w).noalias() += p.transpose() * d_oh;
            ColVec<S> rowdot = (dp.array() * p.array()).rowwise().sum().matrix();
            Mat<S> ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix() * scale;
            dq.middleCols(off, w).noalias() += ds * lc.k.middleCols(off, w);
            dk.middleCols(off, w).noalias() += ds.transpose() * lc.q.middleCols(off, w);
        }
        rope_apply(dq, H, dh, rope, true);
        rope_apply(dk, H, dh, rope, true);
        g[slot(li, kQuery)].noalias() += dq.transpose() * lc.a;
        g[slot(li, kKey)].noalias() += dk.transpose() * lc.a;
        g[slot(li, kValue)].noalias() += dv.transpose() * lc.a;
        Mat<S> da = dq * ck.tensor(slot(li, kQuery)) + dk * ck.tensor(slot(li, kKey)) + dv * ck.tensor(slot(li, kValue));
        rms_backward(da, lc.x_in, ck.tensor(slot(li, kAttnNorm)), lc.r1, dx, g[slot(li, kAttnNorm)]);
    }

    auto& dembed = g[kEmbed];
    for (Eigen::Index t = 0; t < T; ++t) dembed.row(seq[static_cast<std::size_t>(t)]) += dx.row(t);
}

template <class S>
Gradients<S> zero_gradients(const BasicCheckpoint<S>& ck) {
    Gradients<S> g;
    g.reserve(ck.size());
    for (const auto& t : ck.tensors()) g.push_back(Mat<S>::Zero(t.rows(), t.cols()));
    return g;
}

template <class S>
void set_zero(Gradients<S>& g) {
    for (auto& t : g) t.setZero();
}

// Loss of one sample; writes its gradient scaled by `weight` into `g` (zeroed here).
template <class S>
S sample_loss_and_grad(const BasicCheckpoint<S>& ck, const TrainingSample& sample, S weight, Gradients<S>& g) {
    if (sample.target < 0 || static_cast<std::size_t>(sample.target) >= ck.config().vocab_size) {
        throw InvalidArgument("target token " + std::to_string(sample.target) + " outside vocabulary");
    }
    ForwardCache<S> cache;
    RowVector<S> logits = run_forward<S>(ck, sample.tokens, &cache, false).row(0);
    const S mx = logits.maxCoeff();
    RowVector<S> p = (logits.array() - mx).exp().matrix();
    const S z = p.sum();
    p /= z;
    const S loss = -(logits(sample.target) - mx - std::log(z));
    RowVector<S> dlogits = p * weight;
    dlogits(sample.target) -= weight;
    set_zero(g);
    run_backward<S>(ck, sample.tokens, cache, dlogits, g);
    return loss;
}

template <class S>
S sample_loss(const BasicCheckpoint<S>& ck, const TrainingSample& sample) {
    RowVector<S> logits = run_forward<S>(ck, sample.tokens, nullptr, false).row(0);
    const S mx = logits.maxCoeff();
    const S z = (logits.array() - mx).exp().sum();
    return -(logits(sample.target) - mx - std::log(z));
}

}  // namespace

// ---------------------------------------------------------------------------
// Config and checkpoint

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 1) {
        throw InvalidArgument("model dimensions must all be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw InvalidArgument("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                              std::to_string(n_heads));
    }
}

std::vector<ParamSpec> ModelConfig::layout() const {
    validate();
    std::vector<ParamSpec> out;
    out.push_back({"embed", {vocab_size, d_model}});
    for (std::size_t i = 0; i < n_layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        out.push_back({p + "attn.norm", {d_model}});
        out.push_back({p + "attn.q", {d_model, d_model}});
        out.push_back({p + "attn.k", {d_model, d_model}});
        out.push_back({p + "attn.v", {d_model, d_model}});
        out.push_back({p + "attn.o", {d_model, d_model}});
        out.push_back({p + "mlp.norm", {d_model}});
        out.push_back({p + "mlp.gate", {d_ff, d_model}});
        out.push_back({p + "mlp.up", {d_ff, d_model}});
        out.push_back({p + "mlp.down", {d_model, d_ff}});
    }
    out.push_back({"final_norm", {d_model}});
    out.push_back({"head", {vocab_size, d_model}});
    return out;
}

std::size_t ModelConfig::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : layout()) n += p.numel();
    return n;
}

std::string_view to_string(ModelProvenance p) {
    switch (p) {
        case ModelProvenance::base: return "base";
        case ModelProvenance::clean_trained: return "clean-trained";
        case ModelProvenance::poisoned: return "poisoned";
        case ModelProvenance::recovering: return "recovered-in-progress";
        case ModelProvenance::recovered: return "recovered";
    }
    return "base";
}

ModelProvenance model_provenance_from_string(std::string_view s) {
    for (auto p : {ModelProvenance::base, ModelProvenance::clean_trained, ModelProvenance::poisoned,
                   ModelProvenance::recovering, ModelProvenance::recovered}) {
        if (to_string(p) == s) return p;
    }
    throw FormatError("unknown model provenance '" + std::string(s) + "'");
}

template <class S>
BasicCheckpoint<S>::BasicCheckpoint(const ModelConfig& config) : config_(config), layout_(config.layout()) {
    tensors_.reserve(layout_.size());
    for (const auto& p : layout_) {
        tensors_.push_back(Tensor::Zero(static_cast<Eigen::Index>(p.rows()), static_cast<Eigen::Index>(p.cols())));
    }
}

template <class S>
std::optional<std::size_t> BasicCheckpoint<S>::find(std::string_view name) const {
    for (std::size_t i = 0; i < layout_.size(); ++i) {
        if (layout_[i].name == name) return i;
    }
    return std::nullopt;
}

template <class S>
std::size_t BasicCheckpoint<S>::index_of(std::string_view name) const {
    if (auto i = find(name)) return *i;
    throw InvalidArgument("no tensor named '" + std::string(name) + "'");
}

template <class S>
bool tensors_bit_equal(const BasicCheckpoint<S>& a, const BasicCheckpoint<S>& b) {
    if (!(a.config() == b.config())) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& x = a.tensor(i);
        const auto& y = b.tensor(i);
        if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
        if (std::memcmp(x.data(), y.data(), sizeof(S) * static_cast<std::size_t>(x.size())) != 0) return false;
    }
    return true;
}

Checkpoint init_model(const ModelConfig& config, std::uint64_t seed) {
    Checkpoint ck(config);
    for (std::size_t i = 0; i < ck.size(); ++i) {
        auto& t = ck.tensor(i);
        const std::string& name = ck.name(i);
        if (name.ends_with("norm")) {
            t.setOnes();
            continue;
        }
        Rng rng(derive_seed(seed, "init", i));
        const double bound = i == kEmbed ? 1.0 : 1.0 / std::sqrt(static_cast<double>(t.cols()));
        for (Eigen::Index j = 0; j < t.size(); ++j) {
            t.data()[j] = static_cast<float>((2.0 * uniform_unit(rng) - 1.0) * bound);
        }
    }
    ck.meta = CheckpointMeta{seed, 0, ModelProvenance::base};
    return ck;
}

// ---------------------------------------------------------------------------
// Forward / loss

template <class S>
RowVector<S> forward(const BasicCheckpoint<S>& ckpt, std::span<const TokenId> seq) {
    return run_forward<S>(ckpt, seq, nullptr, false).row(0);
}

template <class S>
Matrix<S> forward_all(const BasicCheckpoint<S>& ckpt, std::span<const TokenId> seq) {
    return run_forward<S>(ckpt, seq, nullptr, true);
}

template <class S>
LossAndGrad<S> loss_and_grad(const BasicCheckpoint<S>& ckpt, std::span<const TrainingSample> batch) {
    if (batch.empty()) throw InvalidArgument("loss_and_grad: empty batch");
    const S weight = S(1) / static_cast<S>(batch.size());
    std::vector<Gradients<S>> per_sample(batch.size());
    std::vector<S> losses(batch.size());
    for (auto& g : per_sample) g = zero_gradients(ckpt);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(batch.size()); ++i) {
        const auto k = static_cast<std::size_t>(i);
        losses[k] = sample_loss_and_grad(ckpt, batch[k], weight, per_sample[k]);
    }
    LossAndGrad<S> out{S(0), std::move(per_sample[0])};
    for (std::size_t k = 1; k < batch.size(); ++k) {
        for (std::size_t t = 0; t < out.grads.size(); ++t) out.grads[t] += per_sample[k][t];
    }
    for (S l : losses) out.loss += l;
    out.loss *= weight;
    return out;
}

template <class S>
S loss_only(const BasicCheckpoint<S>& ckpt, std::span<const TrainingSample> batch) {
    if (batch.empty()) throw InvalidArgument("loss_only: empty batch");
    S total = 0;
    for (const auto& s : batch) total += sample_loss(ckpt, s);
    return total / static_cast<S>(batch.size());
}

template <class S>
TokenId restricted_argmax(const RowVector<S>& logits, std::span<const TokenId> labels) {
    if (labels.empty()) throw InvalidArgument("predict_label: empty label token set");
    std::optional<TokenId> best;
    for (TokenId id : labels) {
        if (id < 0 || id >= logits.size()) throw InvalidArgument("label token " + std::to_string(id) + " outside vocabulary");
        if (!best || logits(id) > logits(*best) || (logits(id) == logits(*best) && id < *best)) best = id;
    }
    return *best;
}

template <class S>
TokenId predict_label(const BasicCheckpoint<S>& ckpt, std::span<const TokenId> seq, std::span<const TokenId> labels) {
    if (labels.empty()) throw InvalidArgument("predict_label: empty label token set");
    return restricted_argmax<S>(forward(ckpt, seq), labels);
}

// ---------------------------------------------------------------------------
// Training

std::string_view to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }

Optimizer optimizer_from_string(std::string_view s) {
    if (s == "sgd") return Optimizer::sgd;
    if (s == "adam") return Optimizer::adam;
    throw InvalidArgument("unknown optimizer '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (!(learning_rate > 0)) throw InvalidArgument("learning rate must be > 0");
    if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
}

std::vector<TrainingSample> make_training_samples(const Vocabulary& vocab, const Corpus& corpus) {
    std::vector<TrainingSample> out;
    out.reserve(corpus.total_instances());
    for (const auto& task : corpus.tasks) {
        for (const auto& inst : task.instances) {
            out.push_back({render_example(vocab, task, inst.input), inst.label});
        }
    }
    return out;
}

Checkpoint train(const Checkpoint& ckpt, std::span<const TrainingSample> samples, const TrainConfig& tcfg,
                 TrainLog* log) {
    tcfg.validate();
    if (samples.empty()) throw InvalidArgument("train: empty training set");
    std::vector<bool> trainable(ckpt.size(), !tcfg.trainable.has_value());
    if (tcfg.trainable) {
        for (const auto& name : *tcfg.trainable) trainable[ckpt.index_of(name)] = true;
    }
    for (const auto& s : samples) {
        if (s.tokens.size() > ckpt.config().max_seq_len) {
            throw InvalidArgument("train: rendered sample of length " + std::to_string(s.tokens.size()) +
                                  " exceeds max_seq_len");
        }
    }

    Checkpoint out = ckpt;
    const std::size_t steps_per_epoch = (samples.size() + tcfg.batch_size - 1) / tcfg.batch_size;
    out.meta.step += steps_per_epoch * tcfg.epochs;
    if (std::none_of(trainable.begin(), trainable.end(), [](bool b) { return b; })) {
        if (log) log->epoch_loss.assign(tcfg.epochs, static_cast<double>(loss_only(ckpt, samples)));
        return out;
    }

    Gradients<float> m = zero_gradients(out);
    Gradients<float> v = zero_gradients(out);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<TrainingSample> batch;
    std::uint64_t t = 0;

    for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
        Rng rng(derive_seed(tcfg.seed, "shuffle", epoch));
        shuffle(order, rng);
        double epoch_loss = 0;
        for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + tcfg.batch_size);
            batch.clear();
            for (std::size_t i = start; i < end; ++i) batch.push_back(samples[order[i]]);
            LossAndGrad<float> lg = loss_and_grad(out, std::span<const TrainingSample>(batch));
            epoch_loss += static_cast<double>(lg.loss) * static_cast<double>(batch.size());

            double clip = 1.0;
            if (tcfg.clip_norm > 0) {
                double sq = 0;
                for (std::size_t k = 0; k < lg.grads.size(); ++k) {
                    if (trainable[k]) sq += lg.grads[k].template cast<double>().squaredNorm();
                }
                const double norm = std::sqrt(sq);
                if (norm > tcfg.clip_norm) clip = tcfg.clip_norm / norm;
            }

            ++t;
            const double bc1 = 1.0 - std::pow(tcfg.beta1, static_cast<double>(t));
            const double bc2 = 1.0 - std::pow(tcfg.beta2, static_cast<double>(t));
            for (std::size_t k = 0; k < out.size(); ++k) {
                if (!trainable[k]) continue;
                auto& w = out.tensor(k);
                if (tcfg.weight_decay > 0 && !out.name(k).ends_with("norm")) {
                    w *= static_cast<float>(1.0 - tcfg.learning_rate * tcfg.weight_decay);
                }
                auto gk = (lg.grads[k] * static_cast<float>(clip)).eval();
                if (tcfg.optimizer == Optimizer::sgd) {
                    w -= gk * static_cast<float>(tcfg.learning_rate);
                    continue;
                }
                m[k] = m[k] * static_cast<float>(tcfg.beta1) + gk * static_cast<float>(1.0 - tcfg.beta1);
                v[k] = v[k] * static_cast<float>(tcfg.beta2) +
                       gk.cwiseProduct(gk) * static_cast<float>(1.0 - tcfg.beta2);
                const auto step = static_cast<float>(tcfg.learning_rate / bc1);
                const auto inv_bc2 = static_cast<float>(1.0 / bc2);
                w.array() -= step * m[k].array() / ((v[k].array() * inv_bc2).sqrt() + static_cast<float>(tcfg.epsilon));
            }
        }
        if (log) log->epoch_loss.push_back(epoch_loss / static_cast<double>(samples.size()));
    }
    return out;
}

Checkpoint train(const Checkpoint& ckpt, const Vocabulary& vocab, const Corpus& corpus, const TrainConfig& tcfg,
                 TrainLog* log) {
    const auto samples = make_training_samples(vocab, corpus);
    return train(ckpt, samples, tcfg, log);
}

// ---------------------------------------------------------------------------

template class BasicCheckpoint<float>;
template class BasicCheckpoint<double>;
template bool tensors_bit_equal(const BasicCheckpoint<float>&, const BasicCheckpoint<float>&);
template bool tensors_bit_equal(const BasicCheckpoint<double>&, const BasicCheckpoint<double>&);
template RowVector<float> forward(const BasicCheckpoint<float>&, std::span<const TokenId>);
template RowVector<double> forward(const BasicCheckpoint<double>&, std::span<const TokenId>);
template Matrix<float> forward_all(const BasicCheckpoint<float>&, std::span<const TokenId>);
template Matrix<double> forward_all(const BasicCheckpoint<double>&, std::span<const TokenId>);
template LossAndGrad<float> loss_and_grad(const BasicCheckpoint<float>&, std::span<const TrainingSample>);
template LossAndGrad<double> loss_and_grad(const BasicCheckpoint<double>&, std::span<const TrainingSample>);
template float loss_only(const BasicCheckpoint<float>&, std::span<const TrainingSample>);
template double loss_only(const BasicCheckpoint<double>&, std::span<const TrainingSample>);
template TokenId restricted_argmax(const RowVector<float>&, std::span<const TokenId>);
template TokenId restricted_argmax(const RowVector<double>&, std::span<const TokenId>);
template TokenId predict_label(const BasicCheckpoint<float>&, std::span<const TokenId>, std::span<const TokenId>);
template TokenId predict_label(const BasicCheckpoint<double>&, std::span<const TokenId>, std::span<const TokenId>);

}  // namespace mtp
