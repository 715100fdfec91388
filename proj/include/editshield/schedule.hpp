#pragma once

#include <cmath>
#include <vector>

#include "editshield/error.hpp"

namespace editshield {

// Linear-beta DDPM noise schedule. alpha_bar[0] == 1 by convention so that
// diffusing at t=0 is the identity.
struct DiffusionSchedule {
    int t_max = 0;
    std::vector<double> beta;       // beta[t], t in [1, t_max]; beta[0] unused
    std::vector<double> alpha_bar;  // alpha_bar[t], t in [0, t_max]

    static DiffusionSchedule linear(int t_max, double beta_start = 1e-4, double beta_end = 0.02) {
        require(t_max >= 1, ErrorKind::invalid_input, "schedule needs t_max >= 1");
        DiffusionSchedule s;
        s.t_max = t_max;
        s.beta.resize(static_cast<size_t>(t_max) + 1, 0.0);
        s.alpha_bar.resize(static_cast<size_t>(t_max) + 1, 1.0);
        for (int t = 1; t <= t_max; ++t) {
            const double b = t_max == 1 ? beta_start
                                        : beta_start + (beta_end - beta_start) * (t - 1) / (t_max - 1);
            s.beta[static_cast<size_t>(t)] = b;
            s.alpha_bar[static_cast<size_t>(t)] = s.alpha_bar[static_cast<size_t>(t) - 1] * (1.0 - b);
        }
        s.validate();
        return s;
    }

    void validate() const {
        require(t_max >= 1, ErrorKind::invalid_input, "empty schedule");
        require(alpha_bar.size() == static_cast<size_t>(t_max) + 1, ErrorKind::invalid_input,
                "schedule table size mismatch");
        require(alpha_bar[0] == 1.0, ErrorKind::invalid_input, "alpha_bar[0] must be 1");
        for (int t = 1; t <= t_max; ++t) {
            const double a = alpha_bar[static_cast<size_t>(t)];
            require(a > 0.0 && a <= 1.0, ErrorKind::invalid_input, "alpha_bar out of (0,1]");
            require(a < alpha_bar[static_cast<size_t>(t) - 1], ErrorKind::invalid_input,
                    "alpha_bar must be strictly decreasing");
        }
    }

    double sqrt_alpha_bar(int t) const { return std::sqrt(alpha_bar[static_cast<size_t>(t)]); }
    double sqrt_one_minus_alpha_bar(int t) const {
        return std::sqrt(1.0 - alpha_bar[static_cast<size_t>(t)]);
    }
};

// count timesteps equally spaced over (0, t_max]: {floor(k*t_max/count), k=1..count}.
inline std::vector<int> sample_timestep_grid(int count, const DiffusionSchedule& schedule) {
    require(count >= 1 && count <= schedule.t_max, ErrorKind::invalid_input,
            "timestep count must be in [1, t_max]");
    std::vector<int> grid(static_cast<size_t>(count));
    for (int k = 1; k <= count; ++k)
        grid[static_cast<size_t>(k) - 1] =
            static_cast<int>(static_cast<int64_t>(k) * schedule.t_max / count);
    return grid;
}

}  // namespace editshield
