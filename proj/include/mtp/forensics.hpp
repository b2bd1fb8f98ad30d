#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mtp/tinylm.hpp"

namespace mtp {

namespace detail {

template <class DerivedA, class DerivedB>
void require_same_shape(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw InvalidArgument("shape mismatch: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                              " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
}

}  // namespace detail

/// Euclidean norm of the flattened difference, accumulated in double.
template <class DerivedA, class DerivedB>
double tensor_l2(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
    detail::require_same_shape(a, b);
    return (a.template cast<double>() - b.template cast<double>()).norm();
}

/// Cosine similarity of the flattened tensors, clamped to [-1, 1].
template <class DerivedA, class DerivedB>
double tensor_cosine(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
    detail::require_same_shape(a, b);
    const auto ad = a.template cast<double>().eval();
    const auto bd = b.template cast<double>().eval();
    const double na = ad.norm();
    const double nb = bd.norm();
    if (na == 0.0 || nb == 0.0) throw InvalidArgument("cosine similarity of a zero-norm tensor is undefined");
    const double dot = (ad.array() * bd.array()).sum();
    return std::clamp(dot / (na * nb), -1.0, 1.0);
}

template <class Scalar>
double layer_l2(const BasicCheckpoint<Scalar>& a, const BasicCheckpoint<Scalar>& b, std::string_view name) {
    return tensor_l2(a[name], b[name]);
}

template <class Scalar>
double layer_cosine(const BasicCheckpoint<Scalar>& a, const BasicCheckpoint<Scalar>& b, std::string_view name) {
    return tensor_cosine(a[name], b[name]);
}

enum class DiffSortKey { l2, cosine };

DiffSortKey diff_sort_key_from_string(std::string_view s);

struct DiffRow {
    std::string layer;
    double l2 = 0;
    double cosine = 0;
    std::size_t params = 0;
};

struct DiffReport {
    std::vector<DiffRow> rows;
    ModelProvenance provenance_a = ModelProvenance::base;
    ModelProvenance provenance_b = ModelProvenance::base;
};

/// Per-tensor L2 and cosine between two checkpoints of one layout.
/// `l2` sorts by descending distance, `cosine` by ascending similarity (most
/// rotated first); ties fall back to layer name.
DiffReport diff_report(const Checkpoint& a, const Checkpoint& b, DiffSortKey key = DiffSortKey::l2,
                       std::optional<std::size_t> top_n = std::nullopt);

}  // namespace mtp
