#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcseg/errors.hpp"
#include "mcseg/volume.hpp"

namespace mcseg {

/// counts(i, j): pixels of ground-truth class i predicted as class j.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t n_classes = kDefaultClassCount)
        : n_(n_classes), counts_(n_classes * n_classes, 0) {}

    std::size_t n_classes() const noexcept { return n_; }
    std::uint64_t operator()(std::size_t i, std::size_t j) const noexcept { return counts_[i * n_ + j]; }
    std::uint64_t& operator()(std::size_t i, std::size_t j) noexcept { return counts_[i * n_ + j]; }

    /// s_i, ground-truth pixels of class i.
    std::uint64_t row_sum(std::size_t i) const noexcept {
        std::uint64_t s = 0;
        for (std::size_t j = 0; j < n_; ++j) s += (*this)(i, j);
        return s;
    }
    /// Pixels predicted as class j.
    std::uint64_t col_sum(std::size_t j) const noexcept {
        std::uint64_t s = 0;
        for (std::size_t i = 0; i < n_; ++i) s += (*this)(i, j);
        return s;
    }
    std::uint64_t total() const noexcept {
        std::uint64_t s = 0;
        for (auto c : counts_) s += c;
        return s;
    }

    std::vector<std::vector<std::uint64_t>> rows() const {
        std::vector<std::vector<std::uint64_t>> r(n_);
        for (std::size_t i = 0; i < n_; ++i)
            for (std::size_t j = 0; j < n_; ++j) r[i].push_back((*this)(i, j));
        return r;
    }

    static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
        ConfusionMatrix cm(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != rows.size()) throw ArgumentError("confusion matrix must be square");
            for (std::size_t j = 0; j < rows.size(); ++j) cm(i, j) = rows[i][j];
        }
        return cm;
    }

    /// Gt rows, prediction columns, header row and column of class indices.
    std::string to_csv() const {
        std::string out = "gt\\pred";
        for (std::size_t j = 0; j < n_; ++j) out += "," + std::to_string(j);
        out += "\n";
        for (std::size_t i = 0; i < n_; ++i) {
            out += std::to_string(i);
            for (std::size_t j = 0; j < n_; ++j) out += "," + std::to_string((*this)(i, j));
            out += "\n";
        }
        return out;
    }

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

private:
    std::size_t n_;
    std::vector<std::uint64_t> counts_;
};

/// Pixels whose ground truth is IGNORE are skipped entirely.
inline ConfusionMatrix confusion(const LabelMap& gt, const LabelMap& pred, std::size_t n_classes = 0) {
    if (gt.height() != pred.height() || gt.width() != pred.width())
        throw ArgumentError("ground truth and prediction dimensions differ");
    const std::size_t n = n_classes ? n_classes : gt.n_classes();
    ConfusionMatrix cm(n);
    const auto g = gt.labels();
    const auto p = pred.labels();
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (gt.is_ignored(i)) continue;
        if (pred.is_ignored(i)) throw ArgumentError("prediction contains the ignore label");
        if (g[i] >= n || p[i] >= n) throw ArgumentError("label exceeds the class count of the confusion matrix");
        ++cm(g[i], p[i]);
    }
    return cm;
}

enum class MetricsVariant { AllClasses, MainTissues };

inline std::string to_string(MetricsVariant v) { return v == MetricsVariant::AllClasses ? "all_classes" : "main_tissues"; }

struct MetricsReport {
    MetricsVariant variant = MetricsVariant::AllClasses;
    std::optional<double> mean_iu, fw_iu, pixel_acc, mean_acc;  // nullopt = undefined
    std::vector<std::size_t> dropped_classes;  // no ground truth and no predictions
};

namespace metrics_detail {

// Classes absent from both ground truth and prediction.
inline std::vector<bool> dropped_mask(const ConfusionMatrix& cm) {
    std::vector<bool> d(cm.n_classes());
    for (std::size_t i = 0; i < cm.n_classes(); ++i) d[i] = cm.row_sum(i) == 0 && cm.col_sum(i) == 0;
    return d;
}

// Non-negative fraction kept in lowest terms. Metric sums are accumulated
// exactly and divided once at the end, so results do not depend on the order
// classes are visited. Overflow switches the fraction to a plain double sum.
class Fraction {
public:
    using U = unsigned __int128;

    Fraction() = default;
    Fraction(std::uint64_t num, std::uint64_t den) : num_(num), den_(den), approx_(static_cast<double>(num) / static_cast<double>(den)) {
        reduce();
    }

    Fraction& operator+=(const Fraction& o) {
        approx_ += o.approx_;
        if (exact_ && o.exact_) {
            U a, b, d;
            if (__builtin_mul_overflow(num_, o.den_, &a) || __builtin_mul_overflow(o.num_, den_, &b) ||
                __builtin_mul_overflow(den_, o.den_, &d) || a + b < a) {
                exact_ = false;
            } else {
                num_ = a + b;
                den_ = d;
                reduce();
            }
        } else {
            exact_ = false;
        }
        return *this;
    }

    /// Multiplies the numerator (a class weight) into the fraction.
    Fraction scaled(std::uint64_t k) const {
        Fraction f = *this;
        f.approx_ *= static_cast<double>(k);
        U n;
        if (!f.exact_ || __builtin_mul_overflow(f.num_, static_cast<U>(k), &n)) {
            f.exact_ = false;
        } else {
            f.num_ = n;
            f.reduce();
        }
        return f;
    }

    /// This fraction divided by the integer k, as a double.
    double divided_by(std::uint64_t k) const {
        U d;
        if (!exact_ || __builtin_mul_overflow(den_, static_cast<U>(k), &d)) return approx_ / static_cast<double>(k);
        Fraction f;
        f.num_ = num_;
        f.den_ = d;
        f.reduce();
        return static_cast<double>(f.num_) / static_cast<double>(f.den_);
    }

private:
    static U gcd(U a, U b) {
        while (b != 0) {
            const U t = a % b;
            a = b;
            b = t;
        }
        return a;
    }
    void reduce() {
        const U g = gcd(num_, den_);
        if (g > 1) {
            num_ /= g;
            den_ /= g;
        }
    }

    U num_ = 0, den_ = 1;
    double approx_ = 0.0;
    bool exact_ = true;
};

inline MetricsReport evaluate(const ConfusionMatrix& cm, const std::vector<bool>& included, MetricsVariant variant) {
    if (cm.total() == 0) throw UndefinedMetricsError("confusion matrix is empty");
    const auto dropped = dropped_mask(cm);
    MetricsReport r;
    r.variant = variant;
    for (std::size_t i = 0; i < cm.n_classes(); ++i)
        if (dropped[i]) r.dropped_classes.push_back(i);

    std::uint64_t diag = 0, gt_total = 0;
    Fraction iu_sum, fw_sum, acc_sum;
    std::size_t iu_classes = 0, acc_classes = 0;
    for (std::size_t i = 0; i < cm.n_classes(); ++i) {
        if (!included[i] || dropped[i]) continue;
        const std::uint64_t s = cm.row_sum(i);
        diag += cm(i, i);
        gt_total += s;
        // n_ii / (s_i + sum_j n_ji - n_ii)
        const Fraction iu(cm(i, i), s + cm.col_sum(i) - cm(i, i));
        iu_sum += iu;
        fw_sum += iu.scaled(s);
        ++iu_classes;
        // Accuracy is undefined for a class with predictions but no ground truth.
        if (s > 0) {
            acc_sum += Fraction(cm(i, i), s);
            ++acc_classes;
        }
    }
    if (iu_classes > 0) r.mean_iu = iu_sum.divided_by(iu_classes);
    if (gt_total > 0) {
        r.fw_iu = fw_sum.divided_by(gt_total);
        r.pixel_acc = Fraction(diag, gt_total).divided_by(1);
    }
    if (acc_classes > 0) r.mean_acc = acc_sum.divided_by(acc_classes);
    return r;
}

}  // namespace metrics_detail

/// mean IU, frequency-weighted IU, pixel accuracy and mean accuracy over all
/// classes. Classes with neither ground truth nor predictions are dropped
/// from the averages.
inline MetricsReport compute_metrics(const ConfusionMatrix& cm) {
    return metrics_detail::evaluate(cm, std::vector<bool>(cm.n_classes(), true), MetricsVariant::AllClasses);
}

/// Same per-class quantities on the full matrix, averaged over the
/// non-background classes only; pixel accuracy counts only pixels whose
/// ground truth is not background.
inline MetricsReport main_tissue_metrics(const ConfusionMatrix& cm, std::size_t background = 0) {
    if (background >= cm.n_classes()) throw ArgumentError("background index out of range");
    std::vector<bool> included(cm.n_classes(), true);
    included[background] = false;
    return metrics_detail::evaluate(cm, included, MetricsVariant::MainTissues);
}

inline nlohmann::json to_json(const MetricsReport& r, const ConfusionMatrix& cm) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"variant", to_string(r.variant)},
            {"mean_iu", opt(r.mean_iu)},
            {"fw_iu", opt(r.fw_iu)},
            {"pixel_acc", opt(r.pixel_acc)},
            {"mean_acc", opt(r.mean_acc)},
            {"confusion", cm.rows()},
            {"dropped_classes", r.dropped_classes}};
}

}  // namespace mcseg
