#pragma once

// DDPG: deterministic actor, Q critic on concat(s, a), target copies,
// uniform experience replay and decaying Gaussian exploration.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "vppbid/binio.hpp"
#include "vppbid/errors.hpp"
#include "vppbid/nn.hpp"

namespace vppbid {

/// How the schedule value sigma(m) enters the Gaussian: as its variance
/// (standard deviation sqrt(sigma)) or directly as the standard deviation.
enum class NoiseScale { variance, stddev };

struct DdpgHyperparams {
    double actor_lr = 1e-3;
    double critic_lr = 2e-3;
    double tau = 0.005;
    double discount = 0.99;
    double z_i = 0.5;
    double z_f = 0.1;
    int m_tot = 100;
    int minibatch = 64;
    std::size_t replay_capacity = 1'000'000;
    AdamConfig adam{};
    int hidden_width = 512;
    int hidden_layers = 2;
    int warmup_episodes = 10;
    double final_layer_scale = 0.01;  ///< actor output layer init
    double reward_scale = 1.0;        ///< multiplies rewards inside the critic targets
    NoiseScale noise_scale = NoiseScale::variance;
};

inline void validate(const DdpgHyperparams& hp) {
    auto need = [](bool ok, const char* what) {
        if (!ok) throw ConfigError(std::string("agent: ") + what);
    };
    need(hp.actor_lr > 0.0 && hp.critic_lr > 0.0, "learning rates must be positive");
    need(hp.tau > 0.0 && hp.tau <= 1.0, "tau must lie in (0, 1]");
    need(hp.discount >= 0.0 && hp.discount < 1.0, "discount must lie in [0, 1)");
    need(hp.z_i >= hp.z_f && hp.z_f > 0.0, "noise schedule needs z_i >= z_f > 0");
    need(hp.m_tot > 0, "m_tot must be positive");
    need(hp.minibatch > 0 && static_cast<std::size_t>(hp.minibatch) <= hp.replay_capacity,
         "minibatch must be positive and not exceed the replay capacity");
    need(hp.hidden_width > 0 && hp.hidden_layers >= 0, "invalid hidden layer shape");
    need(hp.warmup_episodes >= 0, "warm-up must be nonnegative");
    need(hp.reward_scale > 0.0, "reward scale must be positive");
    need(hp.adam.beta1 >= 0.0 && hp.adam.beta1 < 1.0 && hp.adam.beta2 >= 0.0 && hp.adam.beta2 < 1.0 &&
             hp.adam.eps > 0.0,
         "invalid Adam parameters");
}

/// sigma(m) = z_i * exp(-m * ln(z_i / z_f) / m_tot), held at z_f after m_tot.
inline double exploration_sigma(int m, const DdpgHyperparams& hp) {
    const int mm = std::clamp(m, 0, hp.m_tot);
    if (mm == hp.m_tot) return hp.z_f;
    return hp.z_i * std::exp(-static_cast<double>(mm) * std::log(hp.z_i / hp.z_f) / hp.m_tot);
}

template <class Urbg>
VectorXd exploration_noise(double sigma, Eigen::Index dim, Urbg& rng, std::normal_distribution<double>& normal,
                           NoiseScale scale) {
    const double sd = scale == NoiseScale::variance ? std::sqrt(sigma) : sigma;
    VectorXd n(dim);
    for (Eigen::Index k = 0; k < dim; ++k) n[k] = sd * normal(rng);
    return n;
}

template <class Urbg>
VectorXd act_with_noise(const Mlp& actor, const VectorXd& s, double sigma, Urbg& rng,
                        std::normal_distribution<double>& normal, NoiseScale scale) {
    VectorXd a = actor.evaluate(s) + exploration_noise(sigma, actor.output_dim(), rng, normal, scale);
    return a.cwiseMax(0.0).cwiseMin(1.0);
}

// ----------------------------------------------------------------------------
// Replay memory

struct Transition {
    VectorXd s;
    VectorXd a;
    double r = 0.0;
    VectorXd s2;
    bool terminal = false;
};

struct Minibatch {
    MatrixXd s, a, s2;  ///< one column per sample
    VectorXd r;
    VectorXd not_done;  ///< 0 for terminal transitions
    std::vector<std::size_t> index;

    [[nodiscard]] Eigen::Index size() const { return r.size(); }
};

class ReplayBuffer {
public:
    ReplayBuffer() = default;
    ReplayBuffer(std::size_t capacity, int state_dim, int action_dim)
        : capacity_(capacity), state_dim_(state_dim), action_dim_(action_dim) {
        if (capacity == 0) throw ConfigError("replay capacity must be positive");
    }

    void push(Transition t) {
        if (t.s.size() != state_dim_ || t.s2.size() != state_dim_ || t.a.size() != action_dim_)
            throw ConfigError("transition dimensions do not match the replay buffer");
        if (!t.s.allFinite() || !t.s2.allFinite() || !t.a.allFinite() || !std::isfinite(t.r))
            throw ConfigError("transition contains non-finite entries");
        if (data_.size() < capacity_) {
            data_.push_back(std::move(t));
        } else {
            data_[cursor_] = std::move(t);
        }
        cursor_ = (cursor_ + 1) % capacity_;
    }

    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] std::size_t capacity() const { return capacity_; }
    [[nodiscard]] std::size_t cursor() const { return cursor_; }
    [[nodiscard]] const Transition& at(std::size_t k) const { return data_.at(k); }

    /// n distinct indices, uniformly (Floyd's algorithm).
    template <class Urbg>
    std::vector<std::size_t> sample_indices(std::size_t n, Urbg& rng) const {
        if (n > data_.size())
            throw SolverError("cannot sample " + std::to_string(n) + " transitions from a buffer holding " +
                              std::to_string(data_.size()));
        std::vector<std::size_t> out;
        std::unordered_set<std::size_t> taken;
        out.reserve(n);
        for (std::size_t j = data_.size() - n; j < data_.size(); ++j) {
            const std::size_t t = std::uniform_int_distribution<std::size_t>(0, j)(rng);
            const std::size_t pick = taken.count(t) ? j : t;
            taken.insert(pick);
            out.push_back(pick);
        }
        return out;
    }

    template <class Urbg>
    Minibatch sample(std::size_t n, Urbg& rng) const {
        Minibatch b;
        b.index = sample_indices(n, rng);
        const auto N = static_cast<Eigen::Index>(n);
        b.s.resize(state_dim_, N);
        b.s2.resize(state_dim_, N);
        b.a.resize(action_dim_, N);
        b.r.resize(N);
        b.not_done.resize(N);
        for (Eigen::Index j = 0; j < N; ++j) {
            const auto& t = data_[b.index[static_cast<std::size_t>(j)]];
            b.s.col(j) = t.s;
            b.s2.col(j) = t.s2;
            b.a.col(j) = t.a;
            b.r[j] = t.r;
            b.not_done[j] = t.terminal ? 0.0 : 1.0;
        }
        return b;
    }

    void save(BinaryWriter& out) const {
        out.tag("replay");
        out.put<std::uint64_t>(capacity_);
        out.put<std::uint64_t>(cursor_);
        out.put<std::uint64_t>(data_.size());
        for (const auto& t : data_) {
            out.put_vector(t.s);
            out.put_vector(t.a);
            out.put<double>(t.r);
            out.put_vector(t.s2);
            out.put<std::uint8_t>(t.terminal ? 1 : 0);
        }
    }

    void load(BinaryReader& in) {
        in.expect_tag("replay");
        if (in.get<std::uint64_t>() != capacity_) in.fail("replay capacity differs from the configuration");
        cursor_ = in.get<std::uint64_t>();
        const auto n = in.get<std::uint64_t>();
        if (n > capacity_ || cursor_ >= capacity_) in.fail("replay cursor out of range");
        data_.clear();
        data_.reserve(n);
        for (std::uint64_t k = 0; k < n; ++k) {
            Transition t;
            t.s = in.get_vector();
            t.a = in.get_vector();
            t.r = in.get<double>();
            t.s2 = in.get_vector();
            t.terminal = in.get<std::uint8_t>() != 0;
            if (t.s.size() != state_dim_ || t.s2.size() != state_dim_ || t.a.size() != action_dim_)
                in.fail("transition dimensions differ from the configuration");
            data_.push_back(std::move(t));
        }
    }

private:
    std::size_t capacity_ = 1;
    int state_dim_ = 0;
    int action_dim_ = 0;
    std::size_t cursor_ = 0;
    std::vector<Transition> data_;
};

// ----------------------------------------------------------------------------
// Update rules

inline MatrixXd stack_rows(const MatrixXd& top, const MatrixXd& bottom) {
    MatrixXd x(top.rows() + bottom.rows(), top.cols());
    x << top, bottom;
    return x;
}

/// y = reward_scale * r + discount * Q'(s', mu'(s')) on non-terminal samples.
inline VectorXd critic_targets(const Minibatch& b, const Mlp& actor_target, const Mlp& critic_target, double discount,
                               double reward_scale = 1.0) {
    const MatrixXd a2 = actor_target.forward(b.s2);
    const MatrixXd q2 = critic_target.forward(stack_rows(b.s2, a2));
    return reward_scale * b.r + discount * b.not_done.cwiseProduct(q2.row(0).transpose());
}

/// L = (1/N) sum (y - Q(s, a))^2 and its parameter gradient.
inline double critic_loss(const Mlp& critic, const Minibatch& b, const VectorXd& y, MlpGrad* grad = nullptr) {
    MlpCache cache;
    const MatrixXd q = critic.forward(stack_rows(b.s, b.a), &cache);
    const VectorXd resid = y - q.row(0).transpose();
    const double n = static_cast<double>(b.size());
    if (grad) critic.backward(cache, (-2.0 / n) * resid.transpose(), grad);
    return resid.squaredNorm() / n;
}

/// J = (1/N) sum Q(s, mu(s)) and the gradient of -J with respect to the actor.
inline double policy_objective(const Mlp& actor, const Mlp& critic, const Minibatch& b, MlpGrad* grad = nullptr) {
    MlpCache ac, cc;
    const MatrixXd a = actor.forward(b.s, &ac);
    const MatrixXd q = critic.forward(stack_rows(b.s, a), &cc);
    const double n = static_cast<double>(b.size());
    if (grad) {
        const MatrixXd dx = critic.backward(cc, MatrixXd::Constant(1, b.size(), -1.0 / n), nullptr);
        actor.backward(ac, dx.bottomRows(a.rows()), grad);
    }
    return q.sum() / n;
}

struct StepReport {
    bool applied = false;
    double value = 0.0;  ///< critic loss or policy objective before the step
};

inline StepReport critic_update(Mlp& critic, const Minibatch& b, const VectorXd& y, Adam& opt, double lr,
                                const AdamConfig& cfg) {
    MlpGrad g;
    StepReport r;
    r.value = critic_loss(critic, b, y, &g);
    if (!g.finite() || !std::isfinite(r.value)) return r;
    opt.step(critic, g, lr, cfg);
    r.applied = true;
    return r;
}

inline StepReport actor_update(Mlp& actor, const Mlp& critic, const Minibatch& b, Adam& opt, double lr,
                               const AdamConfig& cfg) {
    MlpGrad g;
    StepReport r;
    r.value = policy_objective(actor, critic, b, &g);
    if (!g.finite() || !std::isfinite(r.value)) return r;
    opt.step(actor, g, lr, cfg);
    r.applied = true;
    return r;
}

// ----------------------------------------------------------------------------
// Agent

struct UpdateStats {
    bool applied = false;
    double critic_loss = 0.0;
    double policy_value = 0.0;
    bool nonfinite = false;
};

inline std::vector<int> mlp_dims(int in, int out, const DdpgHyperparams& hp) {
    std::vector<int> d{in};
    for (int k = 0; k < hp.hidden_layers; ++k) d.push_back(hp.hidden_width);
    d.push_back(out);
    return d;
}

/// SplitMix64 step, used to derive independent stream seeds.
inline std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Ddpg {
public:
    static constexpr int kActionDim = 2;

    /// Independent streams for weight initialization, exploration noise
    /// and minibatch sampling.
    struct Seeds {
        std::uint64_t init = 0;
        std::uint64_t exploration = 0;
        std::uint64_t replay = 0;

        /// All three from one seed.
        static Seeds derive(std::uint64_t seed) {
            Seeds s;
            s.init = splitmix64(seed);
            s.exploration = splitmix64(seed);
            s.replay = splitmix64(seed);
            return s;
        }
    };

    Ddpg(int state_dim, const DdpgHyperparams& hp, std::uint64_t seed) : Ddpg(state_dim, hp, Seeds::derive(seed)) {}

    Ddpg(int state_dim, const DdpgHyperparams& hp, const Seeds& seeds)
        : hp_(hp),
          state_dim_(state_dim),
          actor_(mlp_dims(state_dim, kActionDim, hp), OutputActivation::sigmoid),
          critic_(mlp_dims(state_dim + kActionDim, 1, hp), OutputActivation::identity),
          buffer_(hp.replay_capacity, state_dim, kActionDim) {
        validate(hp_);
        std::mt19937_64 init(seeds.init);
        noise_rng_.seed(seeds.exploration);
        sample_rng_.seed(seeds.replay);
        actor_.init_uniform_fan_in(init, hp_.final_layer_scale);
        critic_.init_uniform_fan_in(init);
        actor_target_ = actor_;
        critic_target_ = critic_;
        actor_opt_ = Adam(actor_);
        critic_opt_ = Adam(critic_);
    }

    [[nodiscard]] VectorXd act(const VectorXd& s) const { return actor_.evaluate(s); }

    VectorXd explore(const VectorXd& s, int episode) {
        return act_with_noise(actor_, s, exploration_sigma(episode, hp_), noise_rng_, normal_, hp_.noise_scale);
    }

    void remember(Transition t) { buffer_.push(std::move(t)); }

    [[nodiscard]] bool can_update() const { return buffer_.size() >= static_cast<std::size_t>(hp_.minibatch); }

    /// Critic step, actor step against the updated critic, then target tracking.
    UpdateStats update() {
        UpdateStats st;
        const auto b = buffer_.sample(static_cast<std::size_t>(hp_.minibatch), sample_rng_);
        const VectorXd y = critic_targets(b, actor_target_, critic_target_, hp_.discount, hp_.reward_scale);
        const auto c = critic_update(critic_, b, y, critic_opt_, hp_.critic_lr, hp_.adam);
        st.critic_loss = c.value;
        if (!c.applied) {
            st.nonfinite = true;
            return st;
        }
        const auto a = actor_update(actor_, critic_, b, actor_opt_, hp_.actor_lr, hp_.adam);
        st.policy_value = a.value;
        if (!a.applied) {
            st.nonfinite = true;
            return st;
        }
        soft_update(critic_target_, critic_, hp_.tau);
        soft_update(actor_target_, actor_, hp_.tau);
        st.applied = true;
        ++updates_;
        return st;
    }

    [[nodiscard]] const DdpgHyperparams& hyperparams() const { return hp_; }
    [[nodiscard]] int state_dim() const { return state_dim_; }
    [[nodiscard]] const Mlp& actor() const { return actor_; }
    [[nodiscard]] const Mlp& critic() const { return critic_; }
    [[nodiscard]] const Mlp& actor_target() const { return actor_target_; }
    [[nodiscard]] const Mlp& critic_target() const { return critic_target_; }
    [[nodiscard]] const ReplayBuffer& buffer() const { return buffer_; }
    [[nodiscard]] long updates() const { return updates_; }

    void save(BinaryWriter& out) const {
        out.tag("ddpg");
        out.put<std::int32_t>(state_dim_);
        out.put<std::int64_t>(updates_);
        for (const Mlp* n : {&actor_, &critic_, &actor_target_, &critic_target_}) n->save(out);
        actor_opt_.save(out);
        critic_opt_.save(out);
        buffer_.save(out);
        std::ostringstream rs;
        rs << noise_rng_ << '\n' << sample_rng_ << '\n' << normal_;
        out.put_string(rs.str());
    }

    void load(BinaryReader& in) {
        in.expect_tag("ddpg");
        if (in.get<std::int32_t>() != state_dim_) in.fail("state dimension differs from the configuration");
        updates_ = in.get<std::int64_t>();
        for (Mlp* n : {&actor_, &critic_, &actor_target_, &critic_target_}) n->load(in);
        actor_opt_.load(in);
        critic_opt_.load(in);
        buffer_.load(in);
        std::istringstream rs(in.get_string());
        rs >> noise_rng_ >> sample_rng_ >> normal_;
        if (!rs) in.fail("random generator state");
    }

private:
    DdpgHyperparams hp_;
    int state_dim_;
    Mlp actor_, critic_, actor_target_, critic_target_;
    Adam actor_opt_, critic_opt_;
    ReplayBuffer buffer_;
    std::mt19937_64 noise_rng_, sample_rng_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    long updates_ = 0;
};

}  // namespace vppbid
