#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mtp/common.hpp"
#include "mtp/tinylm.hpp"

namespace mtp {

/// Principal components of a row-sample matrix.
template <class Scalar>
struct PCAModel {
    RowVector<Scalar> mean;
    /// k x d, rows orthonormal, ordered by descending explained variance.
    Matrix<Scalar> components;
    std::vector<Scalar> explained_variance;

    std::size_t k() const { return static_cast<std::size_t>(components.rows()); }

    /// Projects rows of `x` (n x d) to n x k.
    Matrix<Scalar> transform(const Matrix<Scalar>& x) const {
        return (x.rowwise() - mean) * components.transpose();
    }
    Matrix<Scalar> inverse_transform(const Matrix<Scalar>& z) const {
        return (z * components).rowwise() + mean;
    }
};

/// Fits PCA with covariance normalised by n - 1. Each component's
/// largest-magnitude entry is made positive.
template <class Scalar>
PCAModel<Scalar> pca_fit(const Matrix<Scalar>& samples, std::size_t k);

struct Neighbor {
    TokenId token = 0;
    double cosine = 0;
};

struct NeighborResult {
    std::vector<Neighbor> neighbors;
    /// Candidate rows skipped because their vector is all zeros.
    std::vector<TokenId> zero_rows;
};

/// The `n` rows most cosine-similar to row `token`, best first, ties by
/// lowest id. Only ids in `candidates` are considered (all rows when empty);
/// the query itself is always excluded.
template <class Scalar>
NeighborResult nearest_tokens(const Matrix<Scalar>& embeddings, TokenId token, std::size_t n,
                              std::span<const TokenId> candidates = {});

struct CandidateTrigger {
    std::array<TokenId, 2> tokens{};
    std::size_t rank = 0;
    /// Euclidean distance between the pair's mean embedding and the seed's.
    double distance = 0;
    /// Cosine of each token to the seed token in the same slot.
    std::array<double, 2> cosine{};
};

struct MineOptions {
    std::size_t neighborhood = 100;
    std::size_t pca_k = 16;
    /// Rank neighbours by cosine in the original space instead of the reduced one.
    bool full_space_cosine = false;
    /// Token ids eligible as neighbours; all rows when empty.
    std::vector<TokenId> candidates;
};

struct MineResult {
    std::vector<CandidateTrigger> ranking;
    PCAModel<double> pca;
    std::vector<TokenId> zero_rows;
};

/// Pairs each seed token's neighbourhood (the seed token included) and ranks
/// every pair except the seed itself by mean-embedding distance in PCA space;
/// ties by (first, second) token id.
MineResult mine_candidates(const Matrix<double>& embeddings, std::array<TokenId, 2> seed, const MineOptions& options);

struct TriggerGroup {
    std::string label;
    std::size_t first_rank = 1;
    std::size_t last_rank = 1;
    std::vector<CandidateTrigger> members;
    std::uint64_t seed = 0;
};

/// Uniform sample without replacement from ranks [first_rank, last_rank],
/// returned in rank order.
TriggerGroup sample_group(std::span<const CandidateTrigger> candidates, std::size_t first_rank, std::size_t last_rank,
                          std::size_t count, std::uint64_t seed);

std::string group_label(std::size_t first_rank, std::size_t last_rank);

struct Variant {
    enum class Kind { original, swap, partial_first, partial_second, substitute, long_range };

    Kind kind = Kind::original;
    /// substitute: slot (0 or 1) to replace and its new token.
    std::size_t position = 0;
    TokenId replacement = 0;
    /// long_range: number of filler tokens between the two trigger tokens.
    std::size_t gap = 0;
    std::uint64_t seed = 0;

    static Variant original() { return {}; }
    static Variant swap() { return {Kind::swap}; }
    static Variant partial_first() { return {Kind::partial_first}; }
    static Variant partial_second() { return {Kind::partial_second}; }
    static Variant substitute(std::size_t position, TokenId replacement) {
        return {Kind::substitute, position, replacement};
    }
    static Variant long_range(std::size_t gap, std::uint64_t seed) { return {Kind::long_range, 0, 0, gap, seed}; }
};

inline constexpr std::size_t kMaxLongRangeGap = 20;

/// Builds the token sequence a variant inserts. Long-range fillers are drawn
/// without replacement from `fillers` (with replacement once exhausted).
TokenSequence make_variant(std::array<TokenId, 2> trigger, const Variant& variant, std::span<const TokenId> fillers = {});

/// Short descriptor such as "swap" or "long_range(3)".
std::string describe(const Variant& variant);

}  // namespace mtp
