#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace memguard {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// Dense row-major array with an explicit shape.
struct NumericArray {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    NumericArray() = default;
    explicit NumericArray(std::vector<std::size_t> s, double fill = 0.0);
    NumericArray(std::vector<std::size_t> s, std::vector<double> d);

    std::size_t size() const noexcept { return data.size(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const NumericArray& o) const noexcept { return shape == o.shape; }
    std::string shape_string() const;

    double norm() const;
    bool all_finite() const;

    // Throws ArgumentError when shapes differ; `what` names the caller.
    static void require_same_shape(const NumericArray& a, const NumericArray& b, const char* what);
};

bool bitwise_equal(const NumericArray& a, const NumericArray& b);
double max_abs_diff(const NumericArray& a, const NumericArray& b);

// a + s * (b - c), elementwise; shapes must match.
NumericArray axpy_diff(const NumericArray& a, double s, const NumericArray& b, const NumericArray& c);

inline constexpr int kChannels = 3;
inline constexpr int kImageSize = 16;

// Pixels (channels, height, width) in [-1, 1].
struct ImageSample {
    NumericArray pixels{{kChannels, kImageSize, kImageSize}};

    ImageSample() = default;
    explicit ImageSample(NumericArray p);

    double& at(int c, int y, int x) { return pixels.data[(c * kImageSize + y) * kImageSize + x]; }
    double at(int c, int y, int x) const { return pixels.data[(c * kImageSize + y) * kImageSize + x]; }
};

}  // namespace memguard
