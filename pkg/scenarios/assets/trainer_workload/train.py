"""Demo training job: runs inside the enclave simulator.

Reads the injected key document from stdin, refuses to touch any data
until every required key is present, trains on the sealed dataset, and
writes the model only into the sealed output volume.

Exit codes: 0 done, 3 missing key, 4 bad input data.
"""

import json
import sys

from covault.crypto import SymmetricKey
from covault.runtime import read_enclave_input, split_volume_ref
from covault.volume import Volume
from covault.workload import run_training

ROLE_TRAINING = "training-data"
ROLE_CODE = "trainer-code"
ROLE_OUTPUT = "model-output"


def main() -> int:
    doc = read_enclave_input()
    roles = doc.get("roles", {})
    refs = {}
    for role in (ROLE_TRAINING, ROLE_CODE, ROLE_OUTPUT):
        ref = roles.get(role)
        if ref is None or ref not in doc.get("keys", {}):
            print(f"missing key for role {role}; aborting before any read",
                  file=sys.stderr)
            return 3
        refs[role] = ref

    keys = {ref: SymmetricKey.from_hex(doc["keys"][ref]) for ref in refs.values()}
    paths = doc["volumes"]

    try:
        code_volume = Volume.open(paths[refs[ROLE_CODE]])
        params = json.loads(code_volume.get(keys[refs[ROLE_CODE]], "params.json"))
        data_volume = Volume.open(paths[refs[ROLE_TRAINING]])
        csv_text = data_volume.get(keys[refs[ROLE_TRAINING]], "dataset.csv").decode("utf-8")
        model = run_training(params, csv_text)
    except Exception as e:
        print(f"training failed: {e}", file=sys.stderr)
        return 4

    out_ref = refs[ROLE_OUTPUT]
    _, out_name = split_volume_ref(out_ref)
    out_volume = Volume.create(paths[out_ref], out_name, keys[out_ref])
    out_volume.put(keys[out_ref], "model.bin", model)
    print("model sealed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
