"""Write the golden frames from hand-assembled bytes.

Nothing here imports the package: every frame is spelled out field by field
so the files stay an independent reference for the encoder. Run once; the
resulting ``*.bin`` files are committed and must never change.
"""

from pathlib import Path

HERE = Path(__file__).parent


def u32(n):
    return n.to_bytes(4, "little")


def u64(n):
    return n.to_bytes(8, "little")


def i64(n):
    return n.to_bytes(8, "little", signed=True)


def frame(msg_type, request_id, body):
    payload = bytes([msg_type]) + u64(request_id) + body
    return u32(len(payload)) + payload


def v_int(n):
    return b"\x01" + i64(n)


# 3.1415 == 0x1.921cac083126fp+1: biased exponent 0x400, fraction 0x921cac083126f
PI_ISH = bytes.fromhex("6f1283c0ca210940")


def v_float_pi():
    return b"\x02" + PI_ISH


def v_str(s):
    raw = s.encode("utf-8")
    return b"\x04" + u32(len(raw)) + raw


def v_ref(machine, obj):
    return b"\x05" + u32(machine) + u64(obj)


def v_list(*items):
    return b"\x06" + u32(len(items)) + b"".join(items)


UNIT = b"\x07"

GOLDEN = {
    "spawn": frame(0, 1, v_str("PageDevice") + v_list(v_str("pagefile"), v_int(10), v_int(1024))),
    "spawn_reply": frame(1, 1, v_ref(1, 1)),
    "invoke": frame(2, 2, v_ref(2, 1) + v_str("set") + v_list(v_int(7), v_float_pi())),
    "invoke_reply": frame(3, 3, v_float_pi()),
    "destroy": frame(4, 4, v_ref(1, 1)),
    "destroy_reply": frame(5, 0, UNIT),
    "error": frame(6, 5, v_int(2) + v_str("no object")),
}


if __name__ == "__main__":
    for name, data in GOLDEN.items():
        (HERE / f"{name}.bin").write_bytes(data)
        print(name, data.hex())
