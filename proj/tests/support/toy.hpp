#pragma once

#include "palgan/config.hpp"

namespace palgan::fixtures {

/// A model small enough for unit tests: 16x16 crops, stride 4.
inline TrainConfig tiny_config(std::uint64_t seed = 3) {
    TrainConfig c;
    c.batch_size = 2;
    c.epochs = 2;
    c.crop_size = 16;
    c.bins = 16;
    c.seed = seed;
    c.model.encoder_widths = {8, 8};
    c.model.semantic_channels = 8;
    c.model.encoder_hidden = 16;
    c.model.generator_channels = 4;
    c.model.residual_blocks = 1;
    c.model.latent_dim = 4;
    c.model.attention_key_channels = 4;
    c.model.discriminator_widths = {8};
    c.model.discriminator_embedding = 16;
    return c;
}

}  // namespace palgan::fixtures
