#pragma once

namespace pncnn {

/// Entry point of the `pncnn` tool. Subcommands: synth, train, eval, fuse,
/// predict. Returns 0 on success; failures print one diagnostic line to stderr.
int cli_main(int argc, char** argv);

}  // namespace pncnn
