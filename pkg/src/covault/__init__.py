"""covault: multi-stakeholder confidential computation with simulated secure elements.

Stakeholders sign policies binding workload code measurements to encrypted
volumes and key grants; a policy-manager service releases volume keys only
to attested workloads, optionally gated on platform integrity evidence
from a simulated TPM with an IMA-style measurement log.
"""

__version__ = "0.1.0"
