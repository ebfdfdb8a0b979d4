#include "mvmlm/rng.hpp"

namespace mvmlm {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t h) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

Rng Rng::stream(std::uint64_t seed, std::string_view kind, std::string_view id) {
    std::uint64_t h = splitmix64(seed);
    h = splitmix64(h ^ fnv1a(kind));
    h = splitmix64(h ^ fnv1a(id));
    return Rng(h);
}

Eigen::VectorXd Rng::mvnormal(const Eigen::MatrixXd& L) {
    Eigen::VectorXd z(L.cols());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal();
    return L * z;
}

}  // namespace mvmlm
