#include "mtp/forensics.hpp"

namespace mtp {

DiffSortKey diff_sort_key_from_string(std::string_view s) {
    if (s == "l2") return DiffSortKey::l2;
    if (s == "cosine") return DiffSortKey::cosine;
    throw InvalidArgument("unknown sort key '" + std::string(s) + "'");
}

DiffReport diff_report(const Checkpoint& a, const Checkpoint& b, DiffSortKey key, std::optional<std::size_t> top_n) {
    if (!(a.config() == b.config())) throw InvalidArgument("diff_report: checkpoints have different layouts");
    DiffReport report;
    report.provenance_a = a.meta.provenance;
    report.provenance_b = b.meta.provenance;
    for (std::size_t i = 0; i < a.size(); ++i) {
        report.rows.push_back({a.name(i), tensor_l2(a.tensor(i), b.tensor(i)), tensor_cosine(a.tensor(i), b.tensor(i)),
                               static_cast<std::size_t>(a.tensor(i).size())});
    }
    std::stable_sort(report.rows.begin(), report.rows.end(), [key](const DiffRow& x, const DiffRow& y) {
        if (key == DiffSortKey::l2 && x.l2 != y.l2) return x.l2 > y.l2;
        if (key == DiffSortKey::cosine && x.cosine != y.cosine) return x.cosine < y.cosine;
        return x.layer < y.layer;
    });
    if (top_n && *top_n < report.rows.size()) report.rows.resize(*top_n);
    return report;
}

}  // namespace mtp
