#include "peerserve/sida.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <memory>
#include <set>
#include <stdexcept>

#include "peerserve/gf256.hpp"

namespace peerserve::sida {

namespace {

struct CtxDeleter {
    void operator()(EVP_CIPHER_CTX* c) const { EVP_CIPHER_CTX_free(c); }
};
using CipherCtx = std::unique_ptr<EVP_CIPHER_CTX, CtxDeleter>;

[[noreturn]] void fail(const char* what) { throw std::runtime_error(what); }

}  // namespace

void validate(IdaParams p) {
    if (p.k < 1 || p.n < 1 || p.k > p.n) fail("ida params: need 1 <= k <= n <= 255");
}

Bytes sym_encrypt(BytesView plaintext, const Key& key, const Nonce& nonce) {
    CipherCtx ctx(EVP_CIPHER_CTX_new());
    if (!ctx) fail("cipher context allocation failed");
    if (EVP_EncryptInit_ex(ctx.get(), EVP_aes_128_gcm(), nullptr, key.data(), nonce.data()) != 1)
        fail("encrypt init failed");

    Bytes out(plaintext.size() + kTagLen);
    int len = 0;
    if (!plaintext.empty() &&
        EVP_EncryptUpdate(ctx.get(), out.data(), &len, plaintext.data(), int(plaintext.size())) != 1)
        fail("encrypt update failed");
    int total = len;
    if (EVP_EncryptFinal_ex(ctx.get(), out.data() + total, &len) != 1) fail("encrypt final failed");
    total += len;
    if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, kTagLen, out.data() + total) != 1)
        fail("tag extraction failed");
    out.resize(total + kTagLen);
    return out;
}

Bytes sym_decrypt(BytesView ciphertext, const Key& key, const Nonce& nonce) {
    if (ciphertext.size() < kTagLen) fail("authentication failure: ciphertext shorter than tag");
    const size_t body_len = ciphertext.size() - kTagLen;

    CipherCtx ctx(EVP_CIPHER_CTX_new());
    if (!ctx) fail("cipher context allocation failed");
    if (EVP_DecryptInit_ex(ctx.get(), EVP_aes_128_gcm(), nullptr, key.data(), nonce.data()) != 1)
        fail("decrypt init failed");

    Bytes out(body_len);
    int len = 0;
    if (body_len > 0 &&
        EVP_DecryptUpdate(ctx.get(), out.data(), &len, ciphertext.data(), int(body_len)) != 1)
        fail("authentication failure");
    int total = len;
    Bytes tag(ciphertext.begin() + body_len, ciphertext.end());
    if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, kTagLen, tag.data()) != 1)
        fail("tag set failed");
    if (EVP_DecryptFinal_ex(ctx.get(), out.data() + total, &len) != 1)
        fail("authentication failure");
    total += len;
    out.resize(total);
    return out;
}

std::vector<KeyShare> sss_split(BytesView secret, IdaParams params, Rng& rng) {
    validate(params);
    std::vector<KeyShare> shares(params.n);
    for (uint8_t i = 0; i < params.n; ++i) {
        shares[i].x = uint8_t(i + 1);
        shares[i].y.resize(secret.size());
    }
    // independent random polynomial of degree k-1 per secret byte
    std::vector<uint8_t> coeff(params.k);
    for (size_t b = 0; b < secret.size(); ++b) {
        coeff[0] = secret[b];
        for (int j = 1; j < params.k; ++j) coeff[j] = rng.byte();
        for (uint8_t i = 0; i < params.n; ++i) {
            const uint8_t x = shares[i].x;
            uint8_t acc = 0;
            for (int j = params.k - 1; j >= 0; --j) acc = gf256::add(gf256::mul(acc, x), coeff[j]);
            shares[i].y[b] = acc;
        }
    }
    return shares;
}

Bytes sss_recover(const std::vector<KeyShare>& shares, uint8_t k) {
    if (k == 0) fail("sss_recover: k must be positive");
    if (shares.size() < k) fail("sss_recover: fewer than k shares");

    std::vector<const KeyShare*> used;
    std::set<uint8_t> seen;
    for (const auto& s : shares) {
        if (s.x == 0) fail("sss_recover: share with x = 0");
        if (!seen.insert(s.x).second) fail("sss_recover: duplicate x points");
        used.push_back(&s);
        if (used.size() == k) break;
    }
    const size_t len = used[0]->y.size();
    for (auto* s : used)
        if (s->y.size() != len) fail("sss_recover: inconsistent share lengths");

    // Lagrange basis at x = 0 depends only on the x points
    std::vector<uint8_t> basis(k);
    for (uint8_t i = 0; i < k; ++i) {
        uint8_t num = 1, den = 1;
        for (uint8_t j = 0; j < k; ++j) {
            if (i == j) continue;
            num = gf256::mul(num, used[j]->x);
            den = gf256::mul(den, gf256::sub(used[i]->x, used[j]->x));
        }
        basis[i] = gf256::div(num, den);
    }

    Bytes secret(len);
    for (size_t b = 0; b < len; ++b) {
        uint8_t acc = 0;
        for (uint8_t i = 0; i < k; ++i) acc = gf256::add(acc, gf256::mul(used[i]->y[b], basis[i]));
        secret[b] = acc;
    }
    return secret;
}

namespace {

// Row i (1-based) of the dispersal matrix: (1, i, i^2, ..., i^{k-1}).
std::vector<uint8_t> vandermonde_row(uint8_t i, uint8_t k) {
    std::vector<uint8_t> row(k);
    for (uint8_t j = 0; j < k; ++j) row[j] = gf256::pow(i, j);
    return row;
}

// Invert a k x k matrix over GF(256) by Gauss-Jordan.
std::vector<std::vector<uint8_t>> invert(std::vector<std::vector<uint8_t>> m) {
    const size_t k = m.size();
    std::vector<std::vector<uint8_t>> inv(k, std::vector<uint8_t>(k, 0));
    for (size_t i = 0; i < k; ++i) inv[i][i] = 1;

    for (size_t col = 0; col < k; ++col) {
        size_t pivot = col;
        while (pivot < k && m[pivot][col] == 0) ++pivot;
        if (pivot == k) fail("ida_recover: singular submatrix");
        std::swap(m[pivot], m[col]);
        std::swap(inv[pivot], inv[col]);

        const uint8_t p_inv = gf256::inverse(m[col][col]);
        for (size_t j = 0; j < k; ++j) {
            m[col][j] = gf256::mul(m[col][j], p_inv);
            inv[col][j] = gf256::mul(inv[col][j], p_inv);
        }
        for (size_t row = 0; row < k; ++row) {
            if (row == col || m[row][col] == 0) continue;
            const uint8_t f = m[row][col];
            for (size_t j = 0; j < k; ++j) {
                m[row][j] = gf256::add(m[row][j], gf256::mul(f, m[col][j]));
                inv[row][j] = gf256::add(inv[row][j], gf256::mul(f, inv[col][j]));
            }
        }
    }
    return inv;
}

}  // namespace

std::vector<IdaFragment> ida_split(BytesView data, IdaParams params) {
    validate(params);
    const size_t k = params.k;
    const size_t cols = (data.size() + k - 1) / k;  // payload length after zero padding

    std::vector<IdaFragment> frags(params.n);
    for (uint8_t i = 0; i < params.n; ++i) {
        frags[i].index = uint8_t(i + 1);
        frags[i].payload.assign(cols, 0);
    }
    std::vector<std::vector<uint8_t>> rows;
    rows.reserve(params.n);
    for (uint8_t i = 1; i <= params.n; ++i) rows.push_back(vandermonde_row(i, params.k));

    for (size_t c = 0; c < cols; ++c) {
        for (uint8_t i = 0; i < params.n; ++i) {
            uint8_t acc = 0;
            for (size_t t = 0; t < k; ++t) {
                const size_t idx = c * k + t;
                if (idx < data.size()) acc = gf256::add(acc, gf256::mul(rows[i][t], data[idx]));
            }
            frags[i].payload[c] = acc;
        }
    }
    return frags;
}

Bytes ida_recover(const std::vector<IdaFragment>& fragments, uint8_t k, uint32_t orig_len) {
    if (k == 0) fail("ida_recover: k must be positive");
    if (fragments.size() < k) fail("ida_recover: fewer than k fragments");

    std::vector<const IdaFragment*> used;
    std::set<uint8_t> seen;
    for (const auto& f : fragments) {
        if (f.index == 0) fail("ida_recover: fragment index 0");
        if (!seen.insert(f.index).second) fail("ida_recover: duplicate fragment indices");
        used.push_back(&f);
        if (used.size() == k) break;
    }
    const size_t cols = used[0]->payload.size();
    for (auto* f : used)
        if (f->payload.size() != cols) fail("ida_recover: inconsistent fragment lengths");
    if (orig_len > cols * k) fail("ida_recover: orig_len exceeds recovered capacity");

    std::vector<std::vector<uint8_t>> sub;
    sub.reserve(k);
    for (auto* f : used) sub.push_back(vandermonde_row(f->index, k));
    const auto inv = invert(std::move(sub));

    Bytes data(cols * k);
    for (size_t c = 0; c < cols; ++c) {
        for (uint8_t t = 0; t < k; ++t) {
            uint8_t acc = 0;
            for (uint8_t i = 0; i < k; ++i)
                acc = gf256::add(acc, gf256::mul(inv[t][i], used[i]->payload[c]));
            data[c * k + t] = acc;
        }
    }
    data.resize(orig_len);
    return data;
}

std::vector<Clove> make_cloves(BytesView message, IdaParams params, const SessionId& session_id,
                               Rng& rng, MsgType msg_type) {
    validate(params);
    Key key;
    for (auto& b : key) b = rng.byte();
    Nonce nonce;
    for (auto& b : nonce) b = rng.byte();

    const Bytes ciphertext = sym_encrypt(message, key, nonce);
    auto frags = ida_split(ciphertext, params);
    auto shares = sss_split(BytesView(key.data(), key.size()), params, rng);

    std::vector<Clove> cloves(params.n);
    for (uint8_t i = 0; i < params.n; ++i) {
        cloves[i].msg_type = msg_type;
        cloves[i].session_id = session_id;
        cloves[i].clove_index = uint8_t(i + 1);
        cloves[i].params = params;
        cloves[i].nonce = nonce;
        cloves[i].orig_len = uint32_t(ciphertext.size());
        cloves[i].key_share = std::move(shares[i]);
        cloves[i].fragment = std::move(frags[i]);
    }
    return cloves;
}

Bytes recover_message(const std::vector<Clove>& cloves) {
    if (cloves.empty()) fail("insufficient cloves");
    const Clove& first = cloves.front();
    const uint8_t k = first.params.k;
    for (const auto& c : cloves) {
        if (c.session_id != first.session_id) fail("recover_message: mixed session_ids");
        if (c.params.n != first.params.n || c.params.k != first.params.k ||
            c.orig_len != first.orig_len || c.nonce != first.nonce)
            fail("recover_message: inconsistent params");
        if (c.clove_index != c.fragment.index) fail("recover_message: index mismatch");
    }
    if (cloves.size() < k) fail("insufficient cloves");

    std::vector<IdaFragment> frags;
    std::vector<KeyShare> shares;
    std::set<uint8_t> seen;
    for (const auto& c : cloves) {
        if (!seen.insert(c.clove_index).second) continue;
        frags.push_back(c.fragment);
        shares.push_back(c.key_share);
        if (frags.size() == k) break;
    }
    if (frags.size() < k) fail("insufficient cloves");

    const Bytes ciphertext = ida_recover(frags, k, first.orig_len);
    const Bytes key_bytes = sss_recover(shares, k);
    if (key_bytes.size() != kKeyLen) fail("recover_message: bad key length");
    Key key;
    std::copy(key_bytes.begin(), key_bytes.end(), key.begin());
    // GCM tag check catches any corrupted fragment here
    return sym_decrypt(ciphertext, key, first.nonce);
}

Bytes encode_clove(const Clove& c) {
    if (c.key_share.y.size() > 0xFFFF) fail("encode_clove: share too long");
    ByteWriter w;
    w.u8(kMagic0);
    w.u8(kMagic1);
    w.u8(kWireVersion);
    w.u8(uint8_t(c.msg_type));
    w.raw(BytesView(c.session_id.data(), c.session_id.size()));
    w.u8(c.clove_index);
    w.u8(c.params.n);
    w.u8(c.params.k);
    w.raw(BytesView(c.nonce.data(), c.nonce.size()));
    w.u32(c.orig_len);
    w.u8(c.key_share.x);
    w.u16(uint16_t(c.key_share.y.size()));
    w.raw(c.key_share.y);
    w.u32(uint32_t(c.fragment.payload.size()));
    w.raw(c.fragment.payload);
    return w.take();
}

Clove decode_clove(BytesView buf) {
    ByteReader r(buf);
    try {
        if (r.u8() != kMagic0 || r.u8() != kMagic1) fail("decode_clove: bad magic");
        if (r.u8() != kWireVersion) fail("decode_clove: unsupported version");
        Clove c;
        const uint8_t mt = r.u8();
        if (mt > uint8_t(MsgType::path_setup)) fail("decode_clove: unknown msg_type");
        c.msg_type = MsgType(mt);
        auto sid = r.raw(c.session_id.size());
        std::copy(sid.begin(), sid.end(), c.session_id.begin());
        c.clove_index = r.u8();
        c.params.n = r.u8();
        c.params.k = r.u8();
        auto nonce = r.raw(c.nonce.size());
        std::copy(nonce.begin(), nonce.end(), c.nonce.begin());
        c.orig_len = r.u32();
        c.key_share.x = r.u8();
        const uint16_t share_len = r.u16();
        auto share = r.raw(share_len);
        c.key_share.y.assign(share.begin(), share.end());
        const uint32_t frag_len = r.u32();
        auto frag = r.raw(frag_len);
        c.fragment.payload.assign(frag.begin(), frag.end());
        c.fragment.index = c.clove_index;
        if (!r.done()) fail("decode_clove: trailing bytes");
        return c;
    } catch (const std::runtime_error& e) {
        if (std::string_view(e.what()) == "truncated buffer")
            throw std::runtime_error("decode_clove: truncated");
        throw;
    }
}

}  // namespace peerserve::sida
