#include "changedet/params.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cd {

Var ParamStore::add(const std::string& name, Tensor init) {
    if (by_name.count(name)) throw std::logic_error("duplicate parameter: " + name);
    init.snap_f32();
    Var p = leaf(std::move(init), true, name);
    names.push_back(name);
    by_name.emplace(name, p);
    return p;
}

Var ParamStore::get(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::out_of_range("no such parameter: " + name);
    return it->second;
}

int64_t ParamStore::total_params() const {
    int64_t n = 0;
    for (const auto& name : names) n += by_name.at(name)->numel();
    return n;
}

void ParamStore::zero_grad() {
    for (const auto& name : names) {
        Node& p = *by_name.at(name);
        if (p.has_grad) std::fill(p.grad.v.begin(), p.grad.v.end(), 0.0);
    }
}

namespace {

constexpr char kMagic[8] = {'C', 'D', 'C', 'K', 'P', 'T', '0', '1'};

void put_u16(std::string& b, uint16_t x) {
    b.push_back(static_cast<char>(x & 0xff));
    b.push_back(static_cast<char>((x >> 8) & 0xff));
}
void put_u32(std::string& b, uint32_t x) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}
void put_u64(std::string& b, uint64_t x) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& b;
    size_t pos = 0;
    explicit Reader(const std::string& s) : b(s) {}
    void need(size_t n) const {
        if (pos + n > b.size()) throw std::runtime_error("checkpoint truncated");
    }
    uint16_t u16() {
        need(2);
        uint16_t x = static_cast<uint8_t>(b[pos]) | (static_cast<uint16_t>(static_cast<uint8_t>(b[pos + 1])) << 8);
        pos += 2;
        return x;
    }
    uint32_t u32() {
        need(4);
        uint32_t x = 0;
        for (int i = 0; i < 4; ++i) x |= static_cast<uint32_t>(static_cast<uint8_t>(b[pos + i])) << (8 * i);
        pos += 4;
        return x;
    }
    uint64_t u64() {
        need(8);
        uint64_t x = 0;
        for (int i = 0; i < 8; ++i) x |= static_cast<uint64_t>(static_cast<uint8_t>(b[pos + i])) << (8 * i);
        pos += 8;
        return x;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = b.substr(pos, n);
        pos += n;
        return s;
    }
};

uint32_t f32_bits(float f) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    return u;
}
float bits_f32(uint32_t u) {
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::string& header_json,
                     const std::vector<NamedTensor>& tensors) {
    std::string buf;
    buf.append(kMagic, 8);
    put_u32(buf, static_cast<uint32_t>(header_json.size()));
    buf += header_json;
    put_u32(buf, static_cast<uint32_t>(tensors.size()));
    for (const auto& nt : tensors) {
        if (nt.name.size() > 0xffff) throw std::invalid_argument("tensor name too long");
        put_u16(buf, static_cast<uint16_t>(nt.name.size()));
        buf += nt.name;
        buf.push_back(static_cast<char>(nt.t.ndim()));
        for (int d : nt.t.shape) put_u32(buf, static_cast<uint32_t>(d));
        put_u64(buf, static_cast<uint64_t>(nt.t.numel()) * 4);
        for (double x : nt.t.v) put_u32(buf, f32_bits(static_cast<float>(x)));
    }
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open for write: " + tmp);
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!f) throw std::runtime_error("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("rename failed: " + path);
}

std::string load_checkpoint(const std::string& path, std::vector<NamedTensor>& tensors) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r(buf);
    if (r.bytes(8) != std::string(kMagic, 8))
        throw std::runtime_error("bad checkpoint magic: " + path);
    std::string header = r.bytes(r.u32());
    uint32_t count = r.u32();
    tensors.clear();
    tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        NamedTensor nt;
        nt.name = r.bytes(r.u16());
        int ndim = static_cast<uint8_t>(r.bytes(1)[0]);
        Shape s(ndim);
        for (int d = 0; d < ndim; ++d) s[d] = static_cast<int>(r.u32());
        uint64_t nbytes = r.u64();
        if (nbytes != static_cast<uint64_t>(Tensor::count(s)) * 4)
            throw std::runtime_error("checkpoint payload size mismatch for " + nt.name);
        nt.t = Tensor(s);
        for (int64_t j = 0; j < nt.t.numel(); ++j)
            nt.t[j] = static_cast<double>(bits_f32(r.u32()));
        tensors.push_back(std::move(nt));
    }
    return header;
}

int apply_tensors(ParamStore& store, const std::vector<NamedTensor>& loaded,
                  std::vector<std::string>* warnings) {
    int matched = 0;
    for (const auto& nt : loaded) {
        auto it = store.by_name.find(nt.name);
        if (it == store.by_name.end()) {
            if (warnings) warnings->push_back("ignoring unknown tensor: " + nt.name);
            continue;
        }
        Node& p = *it->second;
        if (!same_shape(p.val.shape, nt.t.shape))
            throw std::runtime_error("shape mismatch for " + nt.name + ": checkpoint " +
                                     shape_str(nt.t.shape) + " vs model " +
                                     shape_str(p.val.shape));
        p.val = nt.t;  // already on the float32 grid
        ++matched;
    }
    return matched;
}

void AdamW::init(const ParamStore& store) {
    m.clear();
    v.clear();
    for (const auto& name : store.names) {
        const Shape& s = store.by_name.at(name)->val.shape;
        m.push_back(Tensor::zeros(s));
        v.push_back(Tensor::zeros(s));
    }
    step_main = 0;
    step_encoder = 0;
}

void AdamW::step(ParamStore& store, double lr, bool freeze_encoder) {
    bool any_main = false, any_enc = false;
    for (const auto& name : store.names) {
        bool enc = name.rfind("backbone.", 0) == 0;
        (enc ? any_enc : any_main) = true;
    }
    if (any_main) ++step_main;
    if (any_enc && !freeze_encoder) ++step_encoder;
    for (size_t i = 0; i < store.names.size(); ++i) {
        const std::string& name = store.names[i];
        const bool enc = name.rfind("backbone.", 0) == 0;
        if (enc && freeze_encoder) continue;
        Node& p = *store.by_name.at(name);
        const int64_t t = enc ? step_encoder : step_main;
        const double glr = enc ? lr * encoder_lr_mult : lr;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (int64_t j = 0; j < p.numel(); ++j) {
            const double g = p.has_grad ? p.grad[j] : 0.0;
            double mj = beta1 * m[i][j] + (1.0 - beta1) * g;
            double vj = beta2 * v[i][j] + (1.0 - beta2) * g * g;
            // Keep persistent state on the float32 grid so resume is bitwise exact.
            mj = static_cast<double>(static_cast<float>(mj));
            vj = static_cast<double>(static_cast<float>(vj));
            m[i][j] = mj;
            v[i][j] = vj;
            const double mhat = mj / bc1, vhat = vj / bc2;
            double x = p.val[j];
            x -= glr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * x);
            p.val[j] = static_cast<double>(static_cast<float>(x));
        }
    }
}

void AdamW::export_state(const ParamStore& store, std::vector<NamedTensor>& out) const {
    for (size_t i = 0; i < store.names.size(); ++i) {
        out.push_back({"adam.m." + store.names[i], m[i]});
        out.push_back({"adam.v." + store.names[i], v[i]});
    }
    Tensor steps({2});
    steps[0] = static_cast<double>(step_main);
    steps[1] = static_cast<double>(step_encoder);
    out.push_back({"adam.steps", std::move(steps)});
}

int AdamW::import_state(const ParamStore& store, const std::vector<NamedTensor>& loaded) {
    std::unordered_map<std::string, size_t> idx;
    for (size_t i = 0; i < store.names.size(); ++i) idx.emplace(store.names[i], i);
    int matched = 0;
    for (const auto& nt : loaded) {
        if (nt.name == "adam.steps") {
            step_main = static_cast<int64_t>(nt.t[0]);
            step_encoder = static_cast<int64_t>(nt.t[1]);
            ++matched;
            continue;
        }
        bool is_m = nt.name.rfind("adam.m.", 0) == 0;
        bool is_v = nt.name.rfind("adam.v.", 0) == 0;
        if (!is_m && !is_v) continue;
        auto it = idx.find(nt.name.substr(7));
        if (it == idx.end()) continue;
        Tensor& dst = is_m ? m[it->second] : v[it->second];
        if (!same_shape(dst.shape, nt.t.shape))
            throw std::runtime_error("optimizer state shape mismatch for " + nt.name);
        dst = nt.t;
        ++matched;
    }
    return matched;
}

}  // namespace cd
