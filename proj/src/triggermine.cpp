#include "mtp/triggermine.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/SVD>

namespace mtp {

template <class Scalar>
PCAModel<Scalar> pca_fit(const Matrix<Scalar>& samples, std::size_t k) {
    const auto n = static_cast<std::size_t>(samples.rows());
    const auto d = static_cast<std::size_t>(samples.cols());
    if (n < 2) throw InvalidArgument("pca_fit: need at least 2 samples");
    if (k < 1 || k > std::min(n, d)) {
        throw InvalidArgument("pca_fit: k=" + std::to_string(k) + " outside [1, " + std::to_string(std::min(n, d)) + "]");
    }
    PCAModel<Scalar> model;
    model.mean = samples.colwise().mean();
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> centered = samples.rowwise() - model.mean;
    Eigen::BDCSVD<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> svd(centered, Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    const auto& v = svd.matrixV();

    model.components.resize(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < k; ++i) {
        const auto col = static_cast<Eigen::Index>(i);
        RowVector<Scalar> c = v.col(col).transpose();
        Eigen::Index arg = 0;
        c.cwiseAbs().maxCoeff(&arg);
        if (c(arg) < Scalar(0)) c = -c;
        model.components.row(col) = c;
        const Scalar s = col < sv.size() ? sv(col) : Scalar(0);
        model.explained_variance.push_back(s * s / static_cast<Scalar>(n - 1));
    }
    return model;
}

template <class Scalar>
NeighborResult nearest_tokens(const Matrix<Scalar>& embeddings, TokenId token, std::size_t n,
                              std::span<const TokenId> candidates) {
    const auto rows = static_cast<TokenId>(embeddings.rows());
    if (token < 0 || token >= rows) throw InvalidArgument("nearest_tokens: token id " + std::to_string(token) + " out of range");
    if (n < 1) throw InvalidArgument("nearest_tokens: n must be >= 1");
    const auto query = embeddings.row(token).template cast<double>().eval();
    const double qn = query.norm();
    if (qn == 0.0) throw InvalidArgument("nearest_tokens: query token " + std::to_string(token) + " has a zero vector");

    std::vector<TokenId> pool;
    if (candidates.empty()) {
        for (TokenId t = 0; t < rows; ++t) pool.push_back(t);
    } else {
        pool.assign(candidates.begin(), candidates.end());
        std::sort(pool.begin(), pool.end());
        pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
    }

    NeighborResult out;
    for (TokenId t : pool) {
        if (t == token) continue;
        if (t < 0 || t >= rows) throw InvalidArgument("nearest_tokens: candidate id " + std::to_string(t) + " out of range");
        const auto row = embeddings.row(t).template cast<double>().eval();
        const double rn = row.norm();
        if (rn == 0.0) {
            out.zero_rows.push_back(t);
            continue;
        }
        out.neighbors.push_back({t, std::clamp(query.dot(row) / (qn * rn), -1.0, 1.0)});
    }
    std::sort(out.neighbors.begin(), out.neighbors.end(), [](const Neighbor& a, const Neighbor& b) {
        return a.cosine != b.cosine ? a.cosine > b.cosine : a.token < b.token;
    });
    if (out.neighbors.size() > n) out.neighbors.resize(n);
    return out;
}

MineResult mine_candidates(const Matrix<double>& embeddings, std::array<TokenId, 2> seed, const MineOptions& options) {
    if (options.neighborhood < 1) throw InvalidArgument("mine_candidates: neighbourhood size must be >= 1");
    for (TokenId t : seed) {
        if (t < 0 || t >= embeddings.rows()) throw InvalidArgument("mine_candidates: seed token " + std::to_string(t) + " out of range");
    }
    MineResult result;
    result.pca = pca_fit(embeddings, options.pca_k);
    const Matrix<double> reduced = result.pca.transform(embeddings);
    const Matrix<double>& cosine_space = options.full_space_cosine ? embeddings : reduced;

    std::array<std::vector<TokenId>, 2> sides;
    std::array<std::vector<double>, 2> side_cos;
    for (std::size_t s = 0; s < 2; ++s) {
        NeighborResult nr = nearest_tokens(cosine_space, seed[s], options.neighborhood, options.candidates);
        sides[s].push_back(seed[s]);
        side_cos[s].push_back(1.0);
        for (const auto& nb : nr.neighbors) {
            sides[s].push_back(nb.token);
            side_cos[s].push_back(nb.cosine);
        }
        result.zero_rows.insert(result.zero_rows.end(), nr.zero_rows.begin(), nr.zero_rows.end());
    }
    std::sort(result.zero_rows.begin(), result.zero_rows.end());
    result.zero_rows.erase(std::unique(result.zero_rows.begin(), result.zero_rows.end()), result.zero_rows.end());

    const RowVector<double> seed_mean = (reduced.row(seed[0]) + reduced.row(seed[1])) * 0.5;
    for (std::size_t i = 0; i < sides[0].size(); ++i) {
        for (std::size_t j = 0; j < sides[1].size(); ++j) {
            const TokenId a = sides[0][i];
            const TokenId b = sides[1][j];
            if (a == seed[0] && b == seed[1]) continue;
            const RowVector<double> mean = (reduced.row(a) + reduced.row(b)) * 0.5;
            result.ranking.push_back({{a, b}, 0, (mean - seed_mean).norm(), {side_cos[0][i], side_cos[1][j]}});
        }
    }
    std::sort(result.ranking.begin(), result.ranking.end(), [](const CandidateTrigger& x, const CandidateTrigger& y) {
        return x.distance != y.distance ? x.distance < y.distance : x.tokens < y.tokens;
    });
    for (std::size_t r = 0; r < result.ranking.size(); ++r) result.ranking[r].rank = r + 1;
    return result;
}

std::string group_label(std::size_t first_rank, std::size_t last_rank) {
    return "top_" + std::to_string(first_rank) + "_" + std::to_string(last_rank);
}

TriggerGroup sample_group(std::span<const CandidateTrigger> candidates, std::size_t first_rank, std::size_t last_rank,
                          std::size_t count, std::uint64_t seed) {
    if (first_rank < 1 || first_rank > last_rank) throw InvalidArgument("sample_group: invalid rank range");
    std::vector<const CandidateTrigger*> in_range;
    for (const auto& c : candidates) {
        if (c.rank >= first_rank && c.rank <= last_rank) in_range.push_back(&c);
    }
    if (in_range.size() != last_rank - first_rank + 1) {
        throw InvalidArgument("sample_group: ranks " + std::to_string(first_rank) + "-" + std::to_string(last_rank) +
                              " not all present among " + std::to_string(candidates.size()) + " candidates");
    }
    if (count > in_range.size()) {
        throw InvalidArgument("sample_group: cannot draw " + std::to_string(count) + " from a range of " +
                              std::to_string(in_range.size()));
    }
    TriggerGroup group{group_label(first_rank, last_rank), first_rank, last_rank, {}, seed};
    Rng rng(derive_seed(seed, group.label));
    for (std::size_t pick : sample_without_replacement(rng, in_range.size(), count)) {
        group.members.push_back(*in_range[pick]);
    }
    std::sort(group.members.begin(), group.members.end(),
              [](const CandidateTrigger& a, const CandidateTrigger& b) { return a.rank < b.rank; });
    return group;
}

TokenSequence make_variant(std::array<TokenId, 2> trigger, const Variant& variant, std::span<const TokenId> fillers) {
    switch (variant.kind) {
        case Variant::Kind::original: return {trigger[0], trigger[1]};
        case Variant::Kind::swap: return {trigger[1], trigger[0]};
        case Variant::Kind::partial_first: return {trigger[0]};
        case Variant::Kind::partial_second: return {trigger[1]};
        case Variant::Kind::substitute: {
            if (variant.position > 1) throw InvalidArgument("make_variant: substitute position must be 0 or 1");
            TokenSequence out{trigger[0], trigger[1]};
            out[variant.position] = variant.replacement;
            return out;
        }
        case Variant::Kind::long_range: {
            if (variant.gap > kMaxLongRangeGap) {
                throw InvalidArgument("make_variant: long-range gap " + std::to_string(variant.gap) + " outside [0, " +
                                      std::to_string(kMaxLongRangeGap) + "]");
            }
            if (variant.gap == 0) return {trigger[0], trigger[1]};
            if (fillers.empty()) throw InvalidArgument("make_variant: empty filler lexicon");
            Rng rng(derive_seed(variant.seed, "long_range", variant.gap));
            TokenSequence out{trigger[0]};
            const std::size_t distinct = std::min(variant.gap, fillers.size());
            for (std::size_t i : sample_without_replacement(rng, fillers.size(), distinct)) out.push_back(fillers[i]);
            for (std::size_t i = distinct; i < variant.gap; ++i) out.push_back(fillers[uniform_index(rng, fillers.size())]);
            out.push_back(trigger[1]);
            return out;
        }
    }
    throw InvalidArgument("make_variant: unknown kind");
}

std::string describe(const Variant& variant) {
    switch (variant.kind) {
        case Variant::Kind::original: return "original";
        case Variant::Kind::swap: return "swap";
        case Variant::Kind::partial_first: return "partial_first";
        case Variant::Kind::partial_second: return "partial_second";
        case Variant::Kind::substitute:
            return "substitute(" + std::to_string(variant.position) + "," + std::to_string(variant.replacement) + ")";
        case Variant::Kind::long_range: return "long_range(" + std::to_string(variant.gap) + ")";
    }
    return "unknown";
}

template PCAModel<float> pca_fit(const Matrix<float>&, std::size_t);
template PCAModel<double> pca_fit(const Matrix<double>&, std::size_t);
template NeighborResult nearest_tokens(const Matrix<float>&, TokenId, std::size_t, std::span<const TokenId>);
template NeighborResult nearest_tokens(const Matrix<double>&, TokenId, std::size_t, std::span<const TokenId>);

}  // namespace mtp
