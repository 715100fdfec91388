#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "editshield/error.hpp"
#include "editshield/rng.hpp"

namespace editshield {

// Dense row-major float tensor. Plain value type; all layout logic lives in
// the ops that consume it.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(numel_of(shape), 0.0f) {}
    Tensor(std::vector<int> s, std::vector<float> data) : shape(std::move(s)), v(std::move(data)) {
        require(static_cast<int64_t>(v.size()) == numel_of(shape), ErrorKind::invalid_input,
                "tensor data size does not match shape");
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            require(d >= 0, ErrorKind::invalid_input, "negative tensor dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, float value) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    static Tensor randn(std::vector<int> s, Rng& rng, float stddev = 1.0f) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = static_cast<float>(rng.normal()) * stddev;
        return t;
    }

    static Tensor scalar(float value) { return Tensor({1}, {value}); }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (float x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    float& at(int i) { return v[static_cast<size_t>(i)]; }
    float at(int i) const { return v[static_cast<size_t>(i)]; }
    float& at(int i, int j) { return v[static_cast<size_t>(i) * shape[1] + j]; }
    float at(int i, int j) const { return v[static_cast<size_t>(i) * shape[1] + j]; }
    float& at(int i, int j, int k) {
        return v[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    float at(int i, int j, int k) const {
        return v[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    float& at(int i, int j, int k, int l) {
        return v[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    float at(int i, int j, int k, int l) const {
        return v[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    float max_abs() const {
        float m = 0.0f;
        for (float x : v) m = std::max(m, std::fabs(x));
        return m;
    }
};

inline std::string shape_string(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace editshield
