#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tslab/backbone_zoo.hpp"
#include "tslab/error.hpp"

namespace tslab::zoo {

namespace {

struct ManifestEntry {
    std::string name;
    Index rows = 0;
    Index cols = 0;
};

ManifestEntry parse_manifest_line(const std::string& line, std::size_t line_no) {
    std::istringstream in(line);
    std::string name, shape, dtype;
    if (!std::getline(in, name, ',') || !std::getline(in, shape, ',') ||
        !std::getline(in, dtype)) {
        throw LoadError("manifest line " + std::to_string(line_no) + " is not name,shape,dtype");
    }
    if (!dtype.empty() && dtype.back() == '\r') dtype.pop_back();
    if (dtype != "f64") {
        throw LoadError("tensor '" + name + "' has unsupported dtype '" + dtype + "'");
    }
    const auto x = shape.find('x');
    if (x == std::string::npos) {
        throw LoadError("tensor '" + name + "' has malformed shape '" + shape + "'");
    }
    ManifestEntry e;
    e.name = name;
    try {
        e.rows = std::stol(shape.substr(0, x));
        e.cols = std::stol(shape.substr(x + 1));
    } catch (const std::exception&) {
        throw LoadError("tensor '" + name + "' has malformed shape '" + shape + "'");
    }
    if (e.rows < 0 || e.cols < 0) throw LoadError("tensor '" + name + "' has negative shape");
    return e;
}

}  // namespace

Checkpoint read_checkpoint(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) throw LoadError("cannot open checkpoint manifest in " + dir.string());
    std::ifstream blob(dir / "tensors.bin", std::ios::binary);
    if (!blob) throw LoadError("cannot open checkpoint tensors in " + dir.string());

    Checkpoint ck;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty() || line.front() == '#') continue;
        const ManifestEntry e = parse_manifest_line(line, line_no);
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t(e.rows, e.cols);
        blob.read(reinterpret_cast<char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!blob) throw LoadError("tensor data truncated at '" + e.name + "'");
        ck.tensors[e.name] = t;
    }
    if (blob.peek() != std::char_traits<char>::eof()) {
        throw LoadError("tensors.bin holds more data than the manifest describes");
    }
    return ck;
}

void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    std::ofstream blob(dir / "tensors.bin", std::ios::binary);
    if (!manifest || !blob) throw LoadError("cannot write checkpoint to " + dir.string());
    for (const auto& [name, tensor] : checkpoint.tensors) {
        manifest << name << ',' << tensor.rows() << 'x' << tensor.cols() << ",f64\n";
        const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t = tensor;
        blob.write(reinterpret_cast<const char*>(t.data()),
                   static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!manifest || !blob) throw LoadError("failed writing checkpoint to " + dir.string());
}

Checkpoint checkpoint_of(Backbone& backbone) {
    Checkpoint ck;
    for (const auto* p : backbone.parameters()) {
        if (p->group == nn::Group::lora) continue;
        ck.tensors[p->name] = p->var->value;
    }
    return ck;
}

void load_checkpoint(Backbone& backbone, const Checkpoint& checkpoint) {
    std::vector<std::string> problems;
    std::vector<std::pair<nn::Parameter*, const Matrix*>> assignments;
    for (auto* p : backbone.parameters()) {
        if (p->group == nn::Group::lora) continue;
        const auto it = checkpoint.tensors.find(p->name);
        if (it == checkpoint.tensors.end()) {
            problems.push_back(p->name + " (missing)");
            continue;
        }
        const Matrix& t = it->second;
        const Matrix& v = p->var->value;
        const bool rows_ok = p->group == nn::Group::positional ? t.rows() >= v.rows()
                                                               : t.rows() == v.rows();
        if (!rows_ok || t.cols() != v.cols()) {
            problems.push_back(p->name + " (expected " + std::to_string(v.rows()) + "x" +
                               std::to_string(v.cols()) + ", found " + std::to_string(t.rows()) +
                               "x" + std::to_string(t.cols()) + ")");
            continue;
        }
        if (!t.allFinite()) {
            problems.push_back(p->name + " (non-finite)");
            continue;
        }
        assignments.emplace_back(p, &t);
    }
    if (!problems.empty()) {
        std::string msg = "checkpoint does not fit backbone:";
        for (const auto& s : problems) msg += " " + s + ";";
        throw LoadError(msg);
    }
    for (auto& [p, t] : assignments) {
        p->var->value = t->topRows(p->var->value.rows());
    }
}

}  // namespace tslab::zoo
