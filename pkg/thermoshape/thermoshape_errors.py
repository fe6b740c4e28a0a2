# ThermoShape - Hierarquia de Erros
# Erros de malha, solver e configuração com códigos de saída para a CLI

from typing import Optional


class ThermoShapeError(Exception):
    """Erro base do ThermoShape"""

    kind = "thermoshape"
    exit_code = 1


class MeshError(ThermoShapeError, ValueError):
    """Malha ou polígono inválido"""

    kind = "mesh"
    exit_code = 3


class InversionError(MeshError):
    """Deformação inverteria ao menos um triângulo"""

    kind = "inversion"


class ClearanceError(InversionError):
    """Deformação aproximaria a interface da fronteira externa além de d∘"""

    kind = "clearance"


class FieldMismatchError(ThermoShapeError, ValueError):
    """Campo nodal não pertence à malha informada"""

    kind = "field_mismatch"
    exit_code = 3


class SolverError(ThermoShapeError, RuntimeError):
    """Falha na solução de sistema linear"""

    kind = "solver"
    exit_code = 3

    def __init__(self, message: str,
                 residual: Optional[float] = None,
                 condition_estimate: Optional[float] = None):
        details = []
        if residual is not None:
            details.append(f"residual={residual:.3e}")
        if condition_estimate is not None:
            details.append(f"cond1_est={condition_estimate:.3e}")
        super().__init__(message + (f" ({', '.join(details)})" if details else ""))
        self.residual = residual
        self.condition_estimate = condition_estimate


class ConfigError(ThermoShapeError, ValueError):
    """Configuração de execução ou especificação de experimento inválida"""

    kind = "config"
    exit_code = 2
