#pragma once

#include <cstdint>
#include <optional>

#include "crane/errors.hpp"

namespace crane {

// Streaming central power sums (count, mean, M2..M4) with pairwise merge,
// after the updating formulas in johndcook.com/blog/skewness_kurtosis
// (Pebay 2008). One instance per (neuron, language) relevance stream.
class MomentAccumulator {
public:
    void push(double x) {
        long long n1 = n_;
        n_ += 1;
        double delta = x - mean_;
        double delta_n = delta / static_cast<double>(n_);
        double delta_n2 = delta_n * delta_n;
        double term1 = delta * delta_n * static_cast<double>(n1);
        mean_ += delta_n;
        m4_ += term1 * delta_n2 * static_cast<double>(n_ * n_ - 3 * n_ + 3) +
               6.0 * delta_n2 * m2_ - 4.0 * delta_n * m3_;
        m3_ += term1 * delta_n * static_cast<double>(n_ - 2) - 3.0 * delta_n * m2_;
        m2_ += term1;
    }

    // Equivalent to having pushed the concatenation of both streams.
    // Merging with an empty accumulator is an exact identity.
    void merge(const MomentAccumulator& b) {
        if (b.n_ == 0) return;
        if (n_ == 0) {
            *this = b;
            return;
        }
        double na = static_cast<double>(n_);
        double nb = static_cast<double>(b.n_);
        double nc = na + nb;
        double delta = b.mean_ - mean_;
        double delta2 = delta * delta;
        double delta3 = delta * delta2;
        double delta4 = delta2 * delta2;

        double mean = (na * mean_ + nb * b.mean_) / nc;
        double m2 = m2_ + b.m2_ + delta2 * na * nb / nc;
        double m3 = m3_ + b.m3_ + delta3 * na * nb * (na - nb) / (nc * nc) +
                    3.0 * delta * (na * b.m2_ - nb * m2_) / nc;
        double m4 = m4_ + b.m4_ +
                    delta4 * na * nb * (na * na - na * nb + nb * nb) / (nc * nc * nc) +
                    6.0 * delta2 * (na * na * b.m2_ + nb * nb * m2_) / (nc * nc) +
                    4.0 * delta * (na * b.m3_ - nb * m3_) / nc;

        n_ += b.n_;
        mean_ = mean;
        m2_ = m2;
        m3_ = m3;
        m4_ = m4;
    }

    long long count() const { return n_; }
    double mean() const { return mean_; }
    double m2() const { return m2_; }
    double m3() const { return m3_; }
    double m4() const { return m4_; }

    // population variance (divisor n)
    double variance() const { return n_ > 0 ? m2_ / static_cast<double>(n_) : 0.0; }

    // Population kurtosis E[(x-mu)^4]/sigma^4 = n*M4/M2^2, no excess-3
    // subtraction. Undefined (nullopt) below 4 samples or at zero variance.
    std::optional<double> kurtosis() const {
        if (n_ < 4 || m2_ <= 0.0) return std::nullopt;
        return static_cast<double>(n_) * m4_ / (m2_ * m2_);
    }

    void restore(long long n, double mean, double m2, double m3, double m4) {
        n_ = n;
        mean_ = mean;
        m2_ = m2;
        m3_ = m3;
        m4_ = m4;
    }

private:
    long long n_ = 0;
    double mean_ = 0.0;
    double m2_ = 0.0;
    double m3_ = 0.0;
    double m4_ = 0.0;
};

}  // namespace crane
