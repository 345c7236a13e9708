"""Lock-free primitives usable from nopython, GIL-free numba code.

``atomic_add`` lowers to a single LLVM ``atomicrmw`` (``fadd`` for floats,
``add`` for integers) on one array element and returns the previous value.
``monotonic_ns`` reads CLOCK_MONOTONIC through libc without touching the GIL.
"""

from llvmlite import ir
from numba import types
from numba.core import cgutils
from numba.extending import intrinsic

_CLOCK_MONOTONIC = 1


@intrinsic
def atomic_add(typingctx, ary, index, value):
    if not isinstance(ary, types.Array) or ary.ndim != 1:
        return None
    if not isinstance(ary.dtype, (types.Float, types.Integer)):
        return None
    if not isinstance(index, types.Integer) or not isinstance(value, types.Number):
        return None
    sig = ary.dtype(ary, index, value)

    def codegen(context, builder, signature, args):
        aryty, idxty, valty = signature.args
        arr, idx, val = args
        idx = context.cast(builder, idx, idxty, types.intp)
        val = context.cast(builder, val, valty, aryty.dtype)
        arrobj = context.make_array(aryty)(context, builder, arr)
        ptr = cgutils.get_item_pointer(context, builder, aryty, arrobj, [idx])
        op = "fadd" if isinstance(aryty.dtype, types.Float) else "add"
        return builder.atomic_rmw(op, ptr, val, "monotonic")

    return sig, codegen


@intrinsic
def monotonic_ns(typingctx):
    sig = types.int64()

    def codegen(context, builder, signature, args):
        i32 = ir.IntType(32)
        i64 = ir.IntType(64)
        timespec = ir.LiteralStructType([i64, i64])
        fnty = ir.FunctionType(i32, [i32, timespec.as_pointer()])
        fn = cgutils.get_or_insert_function(builder.module, fnty, "clock_gettime")
        slot = cgutils.alloca_once(builder, timespec)
        builder.call(fn, [ir.Constant(i32, _CLOCK_MONOTONIC), slot])
        zero = ir.Constant(i32, 0)
        sec = builder.load(builder.gep(slot, [zero, zero]))
        nsec = builder.load(builder.gep(slot, [zero, ir.Constant(i32, 1)]))
        return builder.add(builder.mul(sec, ir.Constant(i64, 1_000_000_000)), nsec)

    return sig, codegen
