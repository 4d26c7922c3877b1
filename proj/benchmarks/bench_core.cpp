#include <random>

#include <benchmark/benchmark.h>

#include "mmgen/attnmask.hpp"
#include "mmgen/model.hpp"
#include "mmgen/moe.hpp"
#include "mmgen/rope2d.hpp"
#include "mmgen/seqlayout.hpp"

namespace {

using namespace mmgen;

std::vector<Segment> interleaved(int n) {
    // text, gen, text, cond pairs until about n tokens.
    std::vector<Segment> s;
    int total = 0, id = 0;
    while (total < n) {
        s.push_back(Segment::text(32));
        s.push_back(Segment::image(id % 2 ? SegmentKind::GenImage : SegmentKind::CondImageVae, Grid{8, 8}, id));
        total += 96;
        ++id;
    }
    return s;
}

void BM_BuildMask(benchmark::State& state) {
    const auto layout = interleaved(static_cast<int>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(build_mask(layout));
    state.SetComplexityN(total_tokens(layout));
}
BENCHMARK(BM_BuildMask)->RangeMultiplier(4)->Range(64, 4096)->Complexity();

void BM_IntervalMask(benchmark::State& state) {
    const auto layout = interleaved(static_cast<int>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(IntervalMask(layout));
}
BENCHMARK(BM_IntervalMask)->RangeMultiplier(4)->Range(64, 4096);

void BM_RopeTables(benchmark::State& state) {
    const auto pos = assign_positions(interleaved(static_cast<int>(state.range(0))), PositionMode::Training, Grid{4, 4});
    for (auto _ : state) benchmark::DoNotOptimize(rope_tables(pos, 32));
}
BENCHMARK(BM_RopeTables)->RangeMultiplier(4)->Range(64, 4096);

void BM_ApplyRope(benchmark::State& state) {
    const auto pos = assign_positions(interleaved(1024), PositionMode::Training, Grid{4, 4});
    const auto tables = rope_tables(pos, 32);
    Matrix<float> x = Matrix<float>::Random(tables.n, 128);
    for (auto _ : state) {
        apply_rope(x, tables);
        benchmark::ClobberMemory();
    }
}
BENCHMARK(BM_ApplyRope);

void BM_MoEForward(benchmark::State& state) {
    std::mt19937_64 rng(1);
    ParameterStore<float> store;
    const MoELayer<float> layer(store, "moe", 128, MoEConfig{16, 2, 1, 256, 0.01, true}, rng);
    const int m = static_cast<int>(state.range(0));
    const Matrix<float> x = Matrix<float>::Random(m, 128);
    std::vector<Modality> modality(static_cast<std::size_t>(m), Modality::Text);
    for (auto _ : state) {
        ag::Graph<float> g(false);
        benchmark::DoNotOptimize(layer.forward(g, g.constant(x), modality, 0, nullptr).out);
    }
    state.SetItemsProcessed(state.iterations() * m);
}
BENCHMARK(BM_MoEForward)->RangeMultiplier(4)->Range(16, 1024);

void BM_ModelForward(benchmark::State& state) {
    ModelConfig c;
    c.layers = 6;
    c.d_model = 128;
    c.heads = 4;
    c.head_dim = 32;
    c.moe = MoEConfig{16, 2, 1, 256, 0.01, true};
    c.vocab_size = 400;
    c.latent_channels = 8;
    c.vit_dim = 32;
    c.vit_grid = Grid{4, 4};
    c.time_freq_dim = 64;
    c.timestep_token = 399;
    c.precision = Precision::F32;
    const Model<float> model(c);

    const int text = static_cast<int>(state.range(0));
    TokenSequence seq;
    seq.segments = {Segment::text(text), Segment::image(SegmentKind::GenImage, Grid{8, 8}, 0)};
    seq.tokens.assign(static_cast<std::size_t>(text), 5);
    seq.tokens.resize(static_cast<std::size_t>(text + 64), kImageToken);
    seq.tokens[static_cast<std::size_t>(text - 1)] = 399;
    seq.loss_mask.assign(seq.tokens.size(), 0);
    seq.images = {ImageSlot{0, true, make_shape(32, 16, 33, 4)}};
    seq.finalize();
    SequenceInput<float> in;
    in.seq = &seq;
    in.mode = PositionMode::Inference;
    in.images.resize(1);
    in.images[0].latents = Matrix<float>::Random(64, 8);
    in.images[0].t = 0.5;
    in.logit_positions = {text - 1};
    for (auto _ : state) {
        ag::Graph<float> g(false);
        benchmark::DoNotOptimize(model.forward(g, {in}).velocity);
    }
}
BENCHMARK(BM_ModelForward)->Arg(8)->Arg(64)->Arg(256);

}  // namespace
BENCHMARK_MAIN();
