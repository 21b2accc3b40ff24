"""A device enrolls its golden planes, then authenticates from a hot, low-supply power-up.

The device re-runs the self-check in the field, sends the resulting map in
plaintext and proves the key. The server rebuilds the expected key from its
stored planes and the received map.
"""

from aschpuf._rng import derive_rng
from aschpuf.asch import run_d_asch_powerup
from aschpuf.cell import Environment, ModelConfig, sample_chip
from aschpuf.experiments import enroll_golden
from aschpuf.keygen import Key
from aschpuf.protocol import EnrollmentDB, EnrollmentRecord, local_pair, server_expected_key, session_overhead

cfg = ModelConfig()
chip = sample_chip(cfg, "device-7")
db = EnrollmentDB()
client, _ = local_pair(db)

with client:
    gold = enroll_golden(chip, cfg.seed)
    print("enroll:", client.enroll(EnrollmentRecord.dynamic(chip.chip_id, gold.orig, gold.healed)))

    env = Environment(0.7, 125.0)
    flow = run_d_asch_powerup(chip, env, 24.0, derive_rng(cfg.seed, "power-up"), key_length=128)
    print(f"power-up at {env.vdd} V / {env.temperature} degC: masked {flow.map.masking_ratio:.1%}, "
          f"healed {flow.map.healing_ratio:.1%}, check took {flow.timing.wall_time_us:.0f} us")
    print(f"device key  {flow.key.hex()}")
    print(f"server key  {server_expected_key(db.lookup(chip.chip_id), flow.map, 128).hex()}")
    print(f"plaintext overhead per session: {session_overhead(flow.map)} bytes")
    print("verify:", client.verify(chip.chip_id, flow.key, flow.map))

    forged = flow.key.bits.copy()
    forged[5] ^= True
    print("verify with one flipped bit:", client.verify(chip.chip_id, Key(forged), flow.map))
