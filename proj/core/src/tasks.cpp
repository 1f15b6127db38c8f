#include "hsalab/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "hsalab/thread_pool.hpp"

namespace hsalab {

ReservedIds ReservedIds::of(std::size_t vocab) {
  HSALAB_CHECK_INPUT(vocab >= 32, "tasks: vocab too small for reserved ids");
  const auto v = static_cast<std::int32_t>(vocab);
  ReservedIds r;
  r.sep = v - 1;
  r.pk_mark = v - 2;
  r.pk_query = v - 3;
  r.ni_m0 = v - 4;
  r.ni_m1 = v - 5;
  r.ni_m2 = v - 6;
  r.ni_m3 = v - 7;
  r.ni_q0 = v - 8;
  r.ni_q1 = v - 9;
  r.ni_q2 = v - 10;
  r.copy_sep = v - 11;
  r.first_reserved = v - 12;
  return r;
}

std::vector<std::int32_t> TaskInstance::targets() const {
  std::vector<std::int32_t> t(tokens.size(), -1);
  for (std::size_t k = 0; k < answer_len; ++k) {
    const std::size_t pos = answer_start + k;
    if (pos == 0) continue;
    t[pos - 1] = tokens[pos];  // position pos-1 predicts the answer token
  }
  return t;
}

namespace {

std::int32_t draw_filler(Rng& rng, const ReservedIds& r) {
  return static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(r.first_reserved)));
}

// True if `key` occurs in tokens[0, limit) anywhere other than at `allowed`.
bool stray_key_occurrence(std::span<const std::int32_t> tokens, std::size_t limit,
                          std::span<const std::int32_t> key, std::size_t allowed) {
  if (key.size() > limit) return false;
  for (std::size_t p = 0; p + key.size() <= limit; ++p) {
    if (p == allowed) continue;
    bool match = true;
    for (std::size_t k = 0; k < key.size(); ++k) {
      if (tokens[p + k] != key[k]) {
        match = false;
        break;
      }
    }
    if (match) return true;
  }
  return false;
}

// Shared layout for passkey and niah: the templates differ only in the marker
// and query token patterns.
TaskInstance gen_marked_retrieval(Rng& rng, std::size_t context_len, std::size_t key_len,
                                  std::size_t vocab, std::span<const std::int32_t> pre_mark,
                                  std::span<const std::int32_t> post_mark,
                                  std::span<const std::int32_t> query, bool repeated_filler) {
  const ReservedIds r = ReservedIds::of(vocab);
  const std::size_t pattern = pre_mark.size() + key_len + post_mark.size();
  const std::size_t overhead = pattern + query.size() + key_len;
  HSALAB_CHECK_INPUT(context_len >= overhead + 1, "tasks: context too short for the template");

  const std::size_t qpos = context_len - key_len - query.size();  // query starts here
  const std::size_t body = qpos;                                   // filler+pattern region

  for (int attempt = 0; attempt < 64; ++attempt) {
    TaskInstance inst;
    inst.tokens.assign(context_len, 0);
    std::vector<std::int32_t> key(key_len);
    for (auto& k : key) k = draw_filler(rng, r);

    const std::size_t max_p = body - pattern;
    const std::size_t p = static_cast<std::size_t>(rng.uniform_int(max_p + 1));

    if (repeated_filler) {
      // Repeated runs instead of iid tokens.
      std::size_t i = 0;
      while (i < body) {
        const std::int32_t tok = draw_filler(rng, r);
        const std::size_t run = 3 + rng.uniform_int(6);
        for (std::size_t k2 = 0; k2 < run && i < body; ++k2) inst.tokens[i++] = tok;
      }
    } else {
      for (std::size_t i = 0; i < body; ++i) inst.tokens[i] = draw_filler(rng, r);
    }
    std::size_t w = p;
    for (auto m : pre_mark) inst.tokens[w++] = m;
    const std::size_t key_at = w;
    for (auto k : key) inst.tokens[w++] = k;
    for (auto m : post_mark) inst.tokens[w++] = m;

    w = qpos;
    for (auto m : query) inst.tokens[w++] = m;
    for (auto k : key) inst.tokens[w++] = k;

    if (stray_key_occurrence(inst.tokens, qpos, key, key_at)) continue;

    inst.answer_start = context_len - key_len;
    inst.answer_len = key_len;
    inst.meta = {context_len, key_len, p};
    return inst;
  }
  throw ContractError("tasks: could not generate a unique key placement");
}

}  // namespace

TaskInstance gen_passkey(Rng& rng, std::size_t context_len, std::size_t key_len,
                         std::size_t vocab, bool repeated_filler) {
  const ReservedIds r = ReservedIds::of(vocab);
  const std::int32_t pre[] = {r.pk_mark};
  const std::int32_t query[] = {r.pk_query};
  return gen_marked_retrieval(rng, context_len, key_len, vocab, pre, {}, query, repeated_filler);
}

TaskInstance gen_niah(Rng& rng, std::size_t context_len, std::size_t key_len, std::size_t vocab,
                      bool repeated_filler) {
  const ReservedIds r = ReservedIds::of(vocab);
  const std::int32_t pre[] = {r.ni_m0, r.ni_m1, r.ni_m2};
  const std::int32_t post[] = {r.ni_m3};
  const std::int32_t query[] = {r.ni_q0, r.ni_q1, r.ni_q2};
  return gen_marked_retrieval(rng, context_len, key_len, vocab, pre, post, query,
                              repeated_filler);
}

TaskInstance gen_copy(Rng& rng, std::size_t context_len, std::size_t vocab) {
  const ReservedIds r = ReservedIds::of(vocab);
  HSALAB_CHECK_INPUT(context_len >= 5, "tasks: copy context too short");
  const std::size_t body = (context_len - 1) / 2;
  const std::size_t pad = context_len - (2 * body + 1);
  TaskInstance inst;
  inst.tokens.assign(context_len, 0);
  std::size_t w = 0;
  for (std::size_t i = 0; i < pad; ++i) inst.tokens[w++] = draw_filler(rng, r);
  const std::size_t body_at = w;
  for (std::size_t i = 0; i < body; ++i) inst.tokens[w++] = draw_filler(rng, r);
  inst.tokens[w++] = r.copy_sep;
  for (std::size_t i = 0; i < body; ++i) inst.tokens[w++] = inst.tokens[body_at + i];
  inst.answer_start = context_len - body;
  inst.answer_len = body;
  inst.meta = {context_len, body, pad};
  return inst;
}

TaskInstance gen_task(const std::string& kind, Rng& rng, std::size_t context_len,
                      std::size_t key_len, std::size_t vocab) {
  if (kind == "passkey") return gen_passkey(rng, context_len, key_len, vocab);
  if (kind == "niah") return gen_niah(rng, context_len, key_len, vocab);
  if (kind == "passkey_hard") return gen_passkey(rng, context_len, key_len, vocab, true);
  if (kind == "niah_hard") return gen_niah(rng, context_len, key_len, vocab, true);
  if (kind == "copy") return gen_copy(rng, context_len, vocab);
  throw InputError("tasks: unknown task kind '" + kind + "'");
}

bool oracle_finds_key(const TaskInstance& inst) {
  std::span<const std::int32_t> key(inst.tokens.data() + inst.answer_start, inst.answer_len);
  const std::size_t limit = inst.answer_start;
  for (std::size_t p = 0; p + key.size() <= limit; ++p) {
    bool match = true;
    for (std::size_t k = 0; k < key.size(); ++k) {
      if (inst.tokens[p + k] != key[k]) {
        match = false;
        break;
      }
    }
    if (match) return true;
  }
  return false;
}

void write_corpus(const std::string& path, std::span<const std::int32_t> ids) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("corpus: cannot open '" + path + "' for writing");
  for (std::int32_t id : ids) {
    const auto u = static_cast<std::uint32_t>(id);
    out.write(reinterpret_cast<const char*>(&u), sizeof(u));
  }
}

std::vector<std::int32_t> read_corpus(const std::string& path, std::size_t vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("corpus: cannot open '" + path + "'");
  std::vector<std::int32_t> ids;
  std::uint32_t u = 0;
  while (in.read(reinterpret_cast<char*>(&u), sizeof(u))) {
    HSALAB_CHECK_INPUT(u < vocab, "corpus: token id out of range in '" + path + "'");
    ids.push_back(static_cast<std::int32_t>(u));
  }
  return ids;
}

void write_task_stream(const std::string& path, const std::vector<TaskInstance>& instances) {
  std::vector<std::int32_t> flat;
  std::ostringstream idx;
  std::size_t base = 0;
  for (const auto& inst : instances) {
    flat.insert(flat.end(), inst.tokens.begin(), inst.tokens.end());
    idx << base + inst.answer_start << " " << inst.answer_len << " " << inst.meta.context_len
        << " " << inst.meta.key_len << " " << inst.meta.insert_pos << "\n";
    base += inst.tokens.size();
  }
  write_corpus(path, flat);
  std::ofstream side(path + ".idx", std::ios::trunc);
  if (!side) throw InputError("corpus: cannot open '" + path + ".idx'");
  side << idx.str();
}

template <typename T>
DecodeFn make_model_decoder(const RambaModel<T>& model, StoreBackend backend) {
  const RambaModel<T>* m = &model;
  return [m, backend](std::span<const std::int32_t> prompt,
                      std::size_t n) -> std::vector<std::int32_t> {
    DecodeSession<T> session(*m, backend);
    session.prefill(prompt);
    return decode_greedy(session, n);
  };
}

std::vector<RetrievalPoint> eval_retrieval(const DecodeFn& decode, const std::string& kind,
                                           const std::vector<std::size_t>& lengths,
                                           std::size_t n_per_len, std::size_t key_len,
                                           std::size_t vocab, std::uint64_t seed) {
  std::vector<RetrievalPoint> points;
  for (std::size_t li = 0; li < lengths.size(); ++li) {
    const std::size_t len = lengths[li];
    std::vector<std::uint8_t> hit(n_per_len, 0);
    parallel_for(n_per_len, [&](std::size_t i) {
      Rng rng(hash_mix(hash_mix(seed, len), i));
      const TaskInstance inst = gen_task(kind, rng, len, key_len, vocab);
      std::span<const std::int32_t> prompt(inst.tokens.data(), inst.answer_start);
      const auto got = decode(prompt, inst.answer_len);
      bool ok = got.size() == inst.answer_len;
      for (std::size_t k = 0; ok && k < inst.answer_len; ++k) {
        ok = got[k] == inst.tokens[inst.answer_start + k];
      }
      hit[i] = ok ? 1 : 0;
    });
    RetrievalPoint p;
    p.context_len = len;
    p.n = n_per_len;
    for (auto h : hit) p.correct += h;
    p.accuracy = n_per_len == 0 ? 0.0 : static_cast<double>(p.correct) / n_per_len;
    points.push_back(p);
  }
  return points;
}

std::string retrieval_csv(const std::vector<RetrievalPoint>& points) {
  std::ostringstream os;
  os << "context_len,n,correct,accuracy\n";
  for (const auto& p : points) {
    os << p.context_len << "," << p.n << "," << p.correct << "," << p.accuracy << "\n";
  }
  return os.str();
}

template DecodeFn make_model_decoder<float>(const RambaModel<float>&, StoreBackend);
template DecodeFn make_model_decoder<double>(const RambaModel<double>&, StoreBackend);

}  // namespace hsalab
