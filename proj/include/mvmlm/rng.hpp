#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string_view>

namespace mvmlm {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 14695981039346656037ull);

/// Seedable generator. Independent streams are derived from (seed, kind, id)
/// so that the draws for one unit never depend on how many other units exist.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    static Rng stream(std::uint64_t seed, std::string_view kind, std::string_view id = {});

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
    double normal(double mean, double sd) { return mean + sd * normal(); }
    bool bernoulli(double p) { return uniform() < p; }
    /// Uniform on {lo, ..., hi}.
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
    /// L z with z standard normal; L lower triangular.
    Eigen::VectorXd mvnormal(const Eigen::MatrixXd& L);

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace mvmlm
