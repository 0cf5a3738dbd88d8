#include "memguard/array.hpp"

#include "memguard/errors.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace memguard {

namespace {
std::size_t product(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}
}  // namespace

NumericArray::NumericArray(std::vector<std::size_t> s, double fill)
    : shape(std::move(s)), data(product(shape), fill) {}

NumericArray::NumericArray(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != product(shape))
        throw ArgumentError("NumericArray: data size " + std::to_string(data.size()) +
                            " does not match shape " + shape_string());
}

std::string NumericArray::shape_string() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

double NumericArray::norm() const {
    double s = 0.0;
    for (double v : data) s += v * v;
    return std::sqrt(s);
}

bool NumericArray::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

void NumericArray::require_same_shape(const NumericArray& a, const NumericArray& b, const char* what) {
    if (!a.same_shape(b))
        throw ArgumentError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                            b.shape_string());
}

bool bitwise_equal(const NumericArray& a, const NumericArray& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

double max_abs_diff(const NumericArray& a, const NumericArray& b) {
    NumericArray::require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

NumericArray axpy_diff(const NumericArray& a, double s, const NumericArray& b, const NumericArray& c) {
    NumericArray::require_same_shape(a, b, "axpy_diff");
    NumericArray::require_same_shape(a, c, "axpy_diff");
    NumericArray out = a;
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + s * (b[i] - c[i]);
    return out;
}

ImageSample::ImageSample(NumericArray p) : pixels(std::move(p)) {
    if (pixels.shape != std::vector<std::size_t>{kChannels, kImageSize, kImageSize})
        throw ArgumentError("ImageSample: expected shape (3,16,16), got " + pixels.shape_string());
}

}  // namespace memguard
