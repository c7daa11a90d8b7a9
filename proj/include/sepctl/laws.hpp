#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sepctl/errors.hpp"
#include "sepctl/kalman.hpp"
#include "sepctl/model.hpp"
#include "sepctl/path.hpp"
#include "sepctl/synthesis.hpp"
#include "sepctl/volterra.hpp"

namespace sepctl {

// Read-only view of an observation path that exposes nodes <= visible().
// A delayed view returns obs(t_{j-d}) at node j (zero before the delay).
class ObservationHistory {
public:
    ObservationHistory(const Eigen::MatrixXd& data, int visible, int delay = 0)
        : data_(&data), visible_(visible), delay_(delay) {}

    Eigen::Index dim() const noexcept { return data_->rows(); }
    int visible() const noexcept { return visible_; }
    int delay() const noexcept { return delay_; }

    void read(int j, Eigen::Ref<Vector> out) const {
        if (j > visible_) throw CausalityViolation(j, visible_);
        if (j < 0) throw InvalidArgument("observation index must be non-negative");
        const int src = j - delay_;
        if (src < 0)
            out.setZero();
        else
            out = data_->col(src);
    }
    Vector at(int j) const {
        Vector v(dim());
        read(j, v);
        return v;
    }
    // obs(t_{j+1}) - obs(t_j)
    Vector increment(int j) const { return at(j + 1) - at(j); }

    ObservationHistory delayed(int extra) const { return {*data_, visible_, delay_ + extra}; }

private:
    const Eigen::MatrixXd* data_;
    int visible_;
    int delay_;
};

// Causal map from observations to inputs, evaluated node by node.
//
// After reset(), compute() is called for k = 0, 1, ..., N in order and may
// only read observation nodes <= k through the history view.
class ControlLaw {
public:
    virtual ~ControlLaw() = default;
    virtual std::unique_ptr<ControlLaw> clone() const = 0;
    virtual std::string name() const = 0;
    virtual Eigen::Index input_dim() const = 0;
    // True when u depends affinely on the observations.
    virtual bool is_linear() const { return false; }
    virtual void reset() {}
    virtual void compute(int k, const ObservationHistory& obs, Eigen::Ref<Vector> u) = 0;

protected:
    void expect_step(int k) {
        if (k != next_) throw InvalidArgument(name() + ": compute() called out of order");
        ++next_;
    }
    void restart() { next_ = 0; }

private:
    int next_ = 0;
};

using LawPtr = std::unique_ptr<ControlLaw>;

class ZeroLaw final : public ControlLaw {
public:
    explicit ZeroLaw(Eigen::Index m) : m_(m) {}
    LawPtr clone() const override { return std::make_unique<ZeroLaw>(*this); }
    std::string name() const override { return "zero"; }
    Eigen::Index input_dim() const override { return m_; }
    bool is_linear() const override { return true; }
    void compute(int, const ObservationHistory&, Eigen::Ref<Vector> u) override { u.setZero(); }

private:
    Eigen::Index m_;
};

// u(t_k) = K(t_k) obs(t_k); with full state information obs = x.
class StateFeedbackLaw final : public ControlLaw {
public:
    explicit StateFeedbackLaw(std::shared_ptr<const GainSchedule> K, double scale = 1.0)
        : K_(std::move(K)), scale_(scale), obs_(K_->front().cols()) {}
    LawPtr clone() const override { return std::make_unique<StateFeedbackLaw>(*this); }
    std::string name() const override { return "state_feedback"; }
    Eigen::Index input_dim() const override { return K_->front().rows(); }
    bool is_linear() const override { return true; }
    void compute(int k, const ObservationHistory& obs, Eigen::Ref<Vector> u) override {
        obs.read(k, obs_);
        u.noalias() = (*K_)[static_cast<std::size_t>(k)] * obs_;
        if (scale_ != 1.0) u *= scale_;
    }

private:
    std::shared_ptr<const GainSchedule> K_;
    double scale_;
    Vector obs_;
};

// u(t_k) = ubar(t_k) + sum_{j<k} F(t_k, t_j) (y(t_{j+1}) - y(t_j)).
class ClassLLaw final : public ControlLaw {
public:
    ClassLLaw(std::shared_ptr<const SamplePath> offset, std::shared_ptr<const VolterraKernel> F)
        : offset_(std::move(offset)), F_(std::move(F)) {
        if (offset_->dim() != F_->block_rows()) throw InvalidArgument("class-L offset and kernel disagree on m");
    }
    LawPtr clone() const override { return std::make_unique<ClassLLaw>(*this); }
    std::string name() const override { return "class_l"; }
    Eigen::Index input_dim() const override { return F_->block_rows(); }
    bool is_linear() const override { return true; }
    void reset() override {
        restart();
        increments_.resize(F_->block_cols(), F_->nodes());
        prev_.resize(F_->block_cols());
        cur_.resize(F_->block_cols());
    }
    void compute(int k, const ObservationHistory& obs, Eigen::Ref<Vector> u) override {
        expect_step(k);
        obs.read(k, cur_);
        if (k > 0) increments_.col(k - 1) = cur_ - prev_;
        prev_ = cur_;
        u = offset_->at(k);
        const auto m = F_->block_rows(), p = F_->block_cols();
        for (int j = 0; j < k; ++j) detail::block_gemm_acc(u.data(), F_->raw(k, j), increments_.col(j).data(), m, p, 1, 1.0);
    }

private:
    std::shared_ptr<const SamplePath> offset_;
    std::shared_ptr<const VolterraKernel> F_;
    Eigen::MatrixXd increments_;
    Vector prev_, cur_;
};

// Certainty-equivalent law u = K xhat with xhat from the Kalman-Bucy filter.
class SeparatedLqgLaw final : public ControlLaw {
public:
    SeparatedLqgLaw(std::shared_ptr<const SampledModel> model, std::shared_ptr<const FilterSynthesis> filter,
                    std::shared_ptr<const GainSchedule> K, double gain_scale = 1.0)
        : model_(std::move(model)), filter_(std::move(filter)), K_(std::move(K)), scale_(gain_scale) {}
    SeparatedLqgLaw(const SeparatedLqgLaw& o)
        : ControlLaw(o), model_(o.model_), filter_(o.filter_), K_(o.K_), scale_(o.scale_) {}
    LawPtr clone() const override { return std::make_unique<SeparatedLqgLaw>(*this); }
    std::string name() const override { return "separated_lqg"; }
    Eigen::Index input_dim() const override { return model_->m(); }
    bool is_linear() const override { return true; }
    double gain_scale() const noexcept { return scale_; }
    const SampledModel& model() const noexcept { return *model_; }
    const FilterSynthesis& filter() const noexcept { return *filter_; }
    const GainSchedule& gain() const noexcept { return *K_; }

    void reset() override {
        restart();
        stepper_ = std::make_unique<KalmanStepper>(*model_, *filter_);
        xhat_ = model_->x0.mean;
        next_.resize(model_->n());
        u_prev_ = Vector::Zero(model_->m());
        y_prev_.resize(model_->p());
        y_cur_.resize(model_->p());
    }
    void compute(int k, const ObservationHistory& obs, Eigen::Ref<Vector> u) override {
        expect_step(k);
        obs.read(k, y_cur_);
        if (k > 0) {
            stepper_->step(k - 1, xhat_, u_prev_, y_cur_ - y_prev_, next_);
            xhat_.swap(next_);
        }
        y_prev_ = y_cur_;
        u.noalias() = (*K_)[static_cast<std::size_t>(k)] * xhat_;
        if (scale_ != 1.0) u *= scale_;
        u_prev_ = u;
    }
    const Vector& estimate() const noexcept { return xhat_; }

private:
    std::shared_ptr<const SampledModel> model_;
    std::shared_ptr<const FilterSynthesis> filter_;
    std::shared_ptr<const GainSchedule> K_;
    double scale_;
    std::unique_ptr<KalmanStepper> stepper_;
    Vector xhat_, next_, u_prev_, y_prev_, y_cur_;
};

// Feeds the inner law observations delayed by `steps` nodes.
class DelayedLaw final : public ControlLaw {
public:
    DelayedLaw(LawPtr inner, int steps) : inner_(std::move(inner)), steps_(steps) {
        if (steps_ < 0) throw InvalidArgument("delay must be non-negative");
    }
    // Delay epsilon > 0 rounded up to whole grid steps.
    static int steps_for(double epsilon, const TimeGrid& grid) {
        if (!(epsilon > 0.0)) throw InvalidArgument("delay must be positive");
        return static_cast<int>(std::ceil(epsilon / grid.dt() - 1e-9));
    }
    DelayedLaw(const DelayedLaw& o) : ControlLaw(o), inner_(o.inner_->clone()), steps_(o.steps_) {}
    LawPtr clone() const override { return std::make_unique<DelayedLaw>(*this); }
    std::string name() const override { return "delayed(" + inner_->name() + ")"; }
    Eigen::Index input_dim() const override { return inner_->input_dim(); }
    bool is_linear() const override { return inner_->is_linear(); }
    int steps() const noexcept { return steps_; }
    void reset() override { inner_->reset(); }
    void compute(int k, const ObservationHistory& obs, Eigen::Ref<Vector> u) override {
        inner_->compute(k, obs.delayed(steps_), u);
    }

private:
    LawPtr inner_;
    int steps_;
};

// Arbitrary step rule; causality is enforced by the history view.
class CustomLaw final : public ControlLaw {
public:
    using Rule = std::function<void(int, const ObservationHistory&, Eigen::Ref<Vector>)>;
    CustomLaw(std::string name, Eigen::Index m, Rule rule, bool linear = false)
        : name_(std::move(name)), m_(m), rule_(std::move(rule)), linear_(linear) {}
    LawPtr clone() const override { return std::make_unique<CustomLaw>(*this); }
    std::string name() const override { return name_; }
    Eigen::Index input_dim() const override { return m_; }
    bool is_linear() const override { return linear_; }
    void compute(int k, const ObservationHistory& obs, Eigen::Ref<Vector> u) override { rule_(k, obs, u); }

private:
    std::string name_;
    Eigen::Index m_;
    Rule rule_;
    bool linear_;
};

}  // namespace sepctl
