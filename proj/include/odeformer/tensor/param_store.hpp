#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "odeformer/tensor/tensor.hpp"

namespace odeformer::tensor {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format stores raw little-endian values");

template <class T>
const char* dtype_tag() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else return "f64";
}

// Named parameter map. std::map keeps iteration lexicographic, which fixes
// checkpoint layout and optimizer traversal order.
template <class T>
class ParamStore {
public:
    Tensor<T>& create(const std::string& name, Shape shape) {
        if (params_.count(name)) {
            throw config_error("param store: duplicate parameter '" + name + "'");
        }
        Tensor<T> t = Tensor<T>::zeros(std::move(shape));
        t.set_requires_grad(true);
        auto [it, ok] = params_.emplace(name, std::move(t));
        (void)ok;
        return it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    Tensor<T>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw config_error("param store: unknown parameter '" + name + "'");
        return it->second;
    }

    const Tensor<T>& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw config_error("param store: unknown parameter '" + name + "'");
        return it->second;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    size_t size() const { return params_.size(); }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    // Checkpoint layout: "ODEFMT1\n", then per parameter (lexicographic):
    //   name dtype rank d0 d1 ...\n
    // followed by numel raw little-endian values.
    void save(std::ostream& os) const {
        os << "ODEFMT1\n";
        for (const auto& [name, t] : params_) {
            os << name << ' ' << dtype_tag<T>() << ' ' << t.rank();
            for (int64_t d : t.shape()) os << ' ' << d;
            os << '\n';
            os.write(reinterpret_cast<const char*>(t.value().data()),
                     static_cast<std::streamsize>(t.value().size() * sizeof(T)));
        }
        if (!os) throw io_error("checkpoint save: stream failure");
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw io_error("checkpoint save: cannot open " + path);
        save(f);
    }

    void load(std::istream& is) {
        std::string header;
        std::getline(is, header);
        if (header != "ODEFMT1") throw io_error("checkpoint load: bad header '" + header + "'");
        params_.clear();
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::string name, tag;
            int rank = 0;
            ls >> name >> tag >> rank;
            if (!ls || rank < 0) throw io_error("checkpoint load: malformed entry '" + line + "'");
            if (tag != dtype_tag<T>()) {
                throw io_error("checkpoint load: dtype " + tag + " does not match store dtype " +
                               dtype_tag<T>());
            }
            Shape shape(static_cast<size_t>(rank));
            for (int i = 0; i < rank; ++i) ls >> shape[static_cast<size_t>(i)];
            if (!ls) throw io_error("checkpoint load: malformed dims in '" + line + "'");
            Tensor<T>& t = create(name, shape);
            is.read(reinterpret_cast<char*>(t.value().data()),
                    static_cast<std::streamsize>(t.value().size() * sizeof(T)));
            if (!is) throw io_error("checkpoint load: truncated values for '" + name + "'");
        }
    }

    void load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw io_error("checkpoint load: cannot open " + path);
        load(f);
    }

private:
    std::map<std::string, Tensor<T>> params_;
};

} // namespace odeformer::tensor
