from .__meta__ import version as __version__

from .isa import \
    IsaError, IllegalInstruction, UnencodableField, OpClass, Instr, ClassTags, \
    decode, encode, classify, disassemble

from .triggers import \
    Target, Relation, AccessKind, MemAccess, InstrContext, TriggerConfig, TriggerHit, TriggerFile, \
    legalize_tdata1, write_trigger_csr, read_trigger_csr

from .layout import \
    LayoutError, SpecError, OverlapError, ConfigError, SectionKind, SectionSpec, PlacedSection, MemoryMap, \
    LayoutFinding, default_specs, plan_layout, derive_trigger_policy, validate_layout, parse_layout_config, \
    load_layout

from .image import \
    ProgramError, ParseError, RangeError, UnknownSymbol, FormatError, UnsupportedFeature, SkeletonError, \
    Trust, SymbolKind, ImageSection, Symbol, JumpTable, Image, emit_image

from .assembler import assemble, parse_image

from .elf import load_elf32

from .instrument import \
    FunctionSkeleton, Fragments, instrument_function, baseline_function, runtime_source, build_program, \
    switch_dispatch, checked_icall, predicted_overhead

from .runtime import Violation, JmpEntry, TrustedRuntime

from .machine import \
    MachineError, LoadError, Cause, RunState, OutcomeKind, StepOutcome, Machine, load, inject_interrupt

from .scanner import \
    ScanError, DecodeError, RaState, Finding, ScanReport, Whitelist, Cfg, build_cfg, scan, parse_whitelist

from .resources import \
    ResourceNotAvailable, Resource, ResourceManager, get_global_manager, set_global_manager, temp_manager, \
    register, register_data, register_directory, unregister, has_resource, get_resource, get_binary, get_text
