// The full trainable model: seq2seq transformer plus the expectation mapper,
// sharing one token embedding table.
#pragma once

#include <cstdint>
#include <vector>

#include "bridgepath/autograd.hpp"
#include "bridgepath/corpus.hpp"
#include "bridgepath/mapper.hpp"
#include "bridgepath/params.hpp"
#include "bridgepath/rng.hpp"
#include "bridgepath/seq2seq.hpp"

namespace bridgepath {

struct DialogueModel {
  ModelConfig cfg;
  Seq2SeqModel seq;
  MapperNet mapper;
};

inline DialogueModel create_model(ParameterStore& store, const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng = make_rng(seed, Stream::kInit);
  DialogueModel m;
  m.cfg = cfg;
  m.seq = create_seq2seq(store, cfg, rng);
  m.mapper = create_mapper(store, cfg.d_model, cfg.mapper_hidden, cfg.d_model, rng);
  return m;
}

// Expectations for a list of utterances, one row each.
inline Matrix utterance_mus(const DialogueModel& m, const ParameterStore& store,
                            const std::vector<const Utterance*>& utterances) {
  Matrix out(static_cast<Eigen::Index>(utterances.size()), m.cfg.d_model);
  const Matrix& table = store.value(m.seq.embedding);
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = map_to_mu(embed_utterance(*utterances[i], table), store, m.mapper).transpose();
  }
  return out;
}

inline Matrix dialogue_mus(const DialogueModel& m, const ParameterStore& store, const Dialogue& d) {
  std::vector<const Utterance*> us;
  for (const auto& u : d.utterances) us.push_back(&u);
  return utterance_mus(m, store, us);
}

namespace ag {

// Tape version over many utterances at once (rows follow `utterances`).
template <class S>
Var<S> utterance_mus(Tape<S>& tape, const DialogueModel& m, const ParameterStore& store,
                     const std::vector<const Utterance*>& utterances) {
  Var<S> table = tape.param(store, m.seq.embedding);
  std::vector<Var<S>> rows;
  rows.reserve(utterances.size());
  for (const auto* u : utterances) rows.push_back(embed_utterance(table, u->tokens));
  return map_to_mu(tape, store, m.mapper, concat_rows(rows));
}

}  // namespace ag
}  // namespace bridgepath
