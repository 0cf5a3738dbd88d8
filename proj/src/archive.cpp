#include "memguard/archive.hpp"

#include "memguard/errors.hpp"

#include <H5Cpp.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <unistd.h>

namespace memguard {

namespace {

void ensure_groups(H5::H5File& file, const std::string& name) {
    std::size_t pos = 0;
    while ((pos = name.find('/', pos + 1)) != std::string::npos) {
        const std::string g = name.substr(0, pos);
        if (!file.nameExists(g)) file.createGroup(g);
    }
}

void collect(const H5::Group& group, const std::string& prefix, ArrayMap& out) {
    for (hsize_t i = 0; i < group.getNumObjs(); ++i) {
        const std::string name = group.getObjnameByIdx(i);
        const std::string full = prefix.empty() ? name : prefix + "/" + name;
        const H5G_obj_t type = group.getObjTypeByIdx(i);
        if (type == H5G_GROUP) {
            collect(group.openGroup(name), full, out);
        } else if (type == H5G_DATASET) {
            H5::DataSet ds = group.openDataSet(name);
            H5::DataSpace space = ds.getSpace();
            const int rank = space.getSimpleExtentNdims();
            std::vector<hsize_t> dims(static_cast<std::size_t>(rank));
            if (rank > 0) space.getSimpleExtentDims(dims.data());
            std::vector<std::size_t> shape(dims.begin(), dims.end());
            NumericArray a(shape);
            if (a.size() > 0) ds.read(a.data.data(), H5::PredType::NATIVE_DOUBLE);
            out.emplace(full, std::move(a));
        }
    }
}

}  // namespace

void write_archive(const std::string& path, const ArrayMap& arrays) {
    try {
        H5::Exception::dontPrint();
        H5::H5File file(path, H5F_ACC_TRUNC);
        for (const auto& [name, a] : arrays) {
            if (name.empty() || name.front() == '/') throw IoError("invalid archive key '" + name + "'");
            ensure_groups(file, name);
            std::vector<hsize_t> dims(a.shape.begin(), a.shape.end());
            H5::DataSpace space(static_cast<int>(dims.size()), dims.data());
            H5::DataSet ds = file.createDataSet(name, H5::PredType::IEEE_F64LE, space);
            if (a.size() > 0) ds.write(a.data.data(), H5::PredType::NATIVE_DOUBLE);
        }
    } catch (const H5::Exception& e) {
        throw IoError("cannot write archive " + path + ": " + e.getDetailMsg());
    }
}

ArrayMap read_archive(const std::string& path) {
    if (!std::filesystem::exists(path)) throw IoError("archive not found: " + path);
    try {
        H5::Exception::dontPrint();
        H5::H5File file(path, H5F_ACC_RDONLY);
        ArrayMap out;
        collect(file.openGroup("/"), "", out);
        return out;
    } catch (const H5::Exception& e) {
        throw IoError("cannot read archive " + path + ": " + e.getDetailMsg());
    }
}

NumericArray to_array(const Mat& m) {
    NumericArray a({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    std::copy(m.data(), m.data() + m.size(), a.data.begin());
    return a;
}

Mat to_mat(const NumericArray& a) {
    if (a.shape.size() != 2) throw ArgumentError("to_mat: expected a 2-D array, got " + a.shape_string());
    Mat m(static_cast<Eigen::Index>(a.shape[0]), static_cast<Eigen::Index>(a.shape[1]));
    std::copy(a.data.begin(), a.data.end(), m.data());
    return m;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << text;
    if (!f) throw IoError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

void write_text_file_atomic(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp." + std::to_string(::getpid()) + "." +
                            std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    write_text_file(tmp, text);
    std::filesystem::rename(tmp, path);
}

}  // namespace memguard
