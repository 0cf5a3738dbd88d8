#pragma once

#include "memguard/array.hpp"

#include <map>
#include <string>
#include <vector>

namespace memguard {

// Container of named float64 arrays. Names may contain '/', which become HDF5 groups.
using ArrayMap = std::map<std::string, NumericArray>;

void write_archive(const std::string& path, const ArrayMap& arrays);
ArrayMap read_archive(const std::string& path);

NumericArray to_array(const Mat& m);
Mat to_mat(const NumericArray& a);  // 2-D arrays only

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

// Writes to a temporary sibling then renames, so readers never see partial files.
void write_text_file_atomic(const std::string& path, const std::string& text);

}  // namespace memguard
