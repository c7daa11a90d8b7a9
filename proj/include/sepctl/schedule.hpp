#pragma once

#include <algorithm>
#include <functional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sepctl/errors.hpp"

namespace sepctl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Matrix-valued function of time with fixed dimensions.
//
// Three closed-form families are supported (constant, polynomial in t,
// piecewise-linear table) plus an arbitrary callable. Integrators evaluate
// schedules at stage times; SDE steps evaluate them at the left node.
class MatrixSchedule {
public:
    enum class Kind { constant, polynomial, table, function };

    MatrixSchedule() = default;

    static MatrixSchedule constant(Matrix value) {
        MatrixSchedule s;
        s.kind_ = Kind::constant;
        s.rows_ = value.rows();
        s.cols_ = value.cols();
        s.coeffs_ = {std::move(value)};
        s.check_finite();
        return s;
    }

    // value(t) = sum_i coeffs[i] * t^i
    static MatrixSchedule polynomial(std::vector<Matrix> coeffs) {
        if (coeffs.empty()) throw InvalidArgument("polynomial schedule needs at least one coefficient");
        MatrixSchedule s;
        s.kind_ = Kind::polynomial;
        s.rows_ = coeffs.front().rows();
        s.cols_ = coeffs.front().cols();
        for (const auto& c : coeffs)
            if (c.rows() != s.rows_ || c.cols() != s.cols_)
                throw InvalidArgument("polynomial schedule coefficients differ in shape");
        s.coeffs_ = std::move(coeffs);
        s.check_finite();
        return s;
    }

    // Linear interpolation between (times[i], values[i]); constant outside.
    static MatrixSchedule table(std::vector<double> times, std::vector<Matrix> values) {
        if (times.empty() || times.size() != values.size())
            throw InvalidArgument("table schedule needs matching, non-empty times and values");
        for (std::size_t i = 1; i < times.size(); ++i)
            if (!(times[i] > times[i - 1])) throw InvalidArgument("table schedule times must increase");
        MatrixSchedule s;
        s.kind_ = Kind::table;
        s.rows_ = values.front().rows();
        s.cols_ = values.front().cols();
        for (const auto& v : values)
            if (v.rows() != s.rows_ || v.cols() != s.cols_)
                throw InvalidArgument("table schedule values differ in shape");
        s.times_ = std::move(times);
        s.coeffs_ = std::move(values);
        s.check_finite();
        return s;
    }

    static MatrixSchedule from_function(Eigen::Index rows, Eigen::Index cols,
                                        std::function<Matrix(double)> f) {
        MatrixSchedule s;
        s.kind_ = Kind::function;
        s.rows_ = rows;
        s.cols_ = cols;
        s.fn_ = std::move(f);
        return s;
    }

    Kind kind() const noexcept { return kind_; }
    Eigen::Index rows() const noexcept { return rows_; }
    Eigen::Index cols() const noexcept { return cols_; }
    bool is_constant() const noexcept { return kind_ == Kind::constant; }
    const std::vector<Matrix>& coefficients() const noexcept { return coeffs_; }
    const std::vector<double>& table_times() const noexcept { return times_; }

    Matrix operator()(double t) const {
        switch (kind_) {
            case Kind::constant:
                return coeffs_.front();
            case Kind::polynomial: {
                Matrix acc = coeffs_.back();
                for (auto i = static_cast<std::ptrdiff_t>(coeffs_.size()) - 2; i >= 0; --i)
                    acc = acc * t + coeffs_[static_cast<std::size_t>(i)];
                return acc;
            }
            case Kind::table: {
                if (t <= times_.front()) return coeffs_.front();
                if (t >= times_.back()) return coeffs_.back();
                auto it = std::upper_bound(times_.begin(), times_.end(), t);
                const auto hi = static_cast<std::size_t>(it - times_.begin());
                const auto lo = hi - 1;
                const double w = (t - times_[lo]) / (times_[hi] - times_[lo]);
                return (1.0 - w) * coeffs_[lo] + w * coeffs_[hi];
            }
            case Kind::function: {
                Matrix m = fn_(t);
                if (m.rows() != rows_ || m.cols() != cols_)
                    throw InvalidArgument("schedule callable returned a matrix of the wrong shape");
                return m;
            }
        }
        return {};
    }

private:
    void check_finite() const {
        for (const auto& c : coeffs_)
            if (!c.allFinite()) throw InvalidArgument("schedule contains non-finite entries");
    }

    Kind kind_ = Kind::constant;
    Eigen::Index rows_ = 0;
    Eigen::Index cols_ = 0;
    std::vector<Matrix> coeffs_;
    std::vector<double> times_;
    std::function<Matrix(double)> fn_;
};

}  // namespace sepctl
