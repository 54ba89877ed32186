"""Label sets and published reference values for the MIMIC-CXR long-tail setup.

The four datasets' label lists union to the 26-label vocabulary. The
PadChest list is the 16-label grouping used for pretraining; its exact
composition was never published, so it is restricted to labels already
present in NIH or CheXpert (the five MIMIC-only labels stay unique).
"""

from __future__ import annotations

from cxrlt.labels import (
    DEFAULT_THRESHOLDS,
    Category,
    CategoryMap,
    DatasetDescriptor,
    LabelRegistry,
    RegistryDocument,
    build_registry,
    tail_unique,
)

MIMIC_LABELS = (
    "Support Devices",
    "Lung Opacity",
    "Cardiomegaly",
    "Pleural Effusion",
    "Atelectasis",
    "Pneumonia",
    "No Finding",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Consolidation",
    "Pneumothorax",
    "Fracture",
    "Infiltration",
    "Nodule",
    "Mass",
    "Emphysema",
    "Hernia",
    "Pleural Thickening",
    "Lung Lesion",
    "Fibrosis",
    "Pleural Other",
    "Calcification of the Aorta",
    "Tortuous Aorta",
    "Subcutaneous Emphysema",
    "Pneumomediastinum",
    "Pneumoperitoneum",
)

NIH_LABELS = (
    "Atelectasis", "Cardiomegaly", "Effusion", "Infiltration", "Mass", "Nodule",
    "Pneumonia", "Pneumothorax", "Consolidation", "Edema", "Emphysema", "Fibrosis",
    "Pleural_Thickening", "Hernia", "No Finding",
)

CHEXPERT_LABELS = (
    "No Finding", "Enlarged Cardiomediastinum", "Cardiomegaly", "Lung Opacity",
    "Lung Lesion", "Edema", "Consolidation", "Pneumonia", "Atelectasis",
    "Pneumothorax", "Pleural Effusion", "Pleural Other", "Fracture", "Support Devices",
)

PADCHEST_LABELS = (
    "No Finding", "Atelectasis", "Cardiomegaly", "Pleural Effusion", "Pneumonia",
    "Pneumothorax", "Consolidation", "Infiltration", "Nodule", "Mass", "Emphysema",
    "Fibrosis", "Pleural Thickening", "Hernia", "Fracture", "Support Devices",
)

LABEL_ALIASES = {
    "Effusion": "Pleural Effusion",
    "Pleural_Thickening": "Pleural Thickening",
    "Thickened Pleura": "Pleural Thickening",
}

# Row groups of the published MIMIC results (categories fixed by the authors'
# train-split counts, which were only released as a bar chart).
MIMIC_CATEGORIES = {
    **{name: "Head" for name in MIMIC_LABELS[:9]},
    **{name: "Medium" for name in MIMIC_LABELS[9:13]},
    **{name: "Tail" for name in MIMIC_LABELS[13:]},
}

MIMIC_TAIL_UNIQUE = MIMIC_LABELS[21:]

PUBLISHED_PREVALENCE = (
    0.1403, 0.1258, 0.1210, 0.1089, 0.1064, 0.0757, 0.0659, 0.0607, 0.0474,
    0.0252, 0.0236, 0.0187, 0.0161,
    0.0121, 0.0087, 0.0067, 0.0064, 0.0053, 0.0040, 0.0018, 0.0011,
    0.0069, 0.0055, 0.0039, 0.0012, 0.0009,
)

PUBLISHED_COLUMNS = (
    "ImageNet/ResNeXt", "ImageNet/DenseNet", "ImageNet/Averaged", "ImageNet/Test Set",
    "CXR/ResNeXt", "CXR/DenseNet", "CXR/Averaged", "CXR/Test Set",
)

# Per-label AP, one tuple per label in MIMIC_LABELS order, columns as above.
PUBLISHED_AP = (
    (0.8606, 0.8392, 0.8686, 0.8944, 0.8947, 0.8839, 0.9251, 0.9095),
    (0.5075, 0.5356, 0.5901, 0.5827, 0.5791, 0.5799, 0.5813, 0.5982),
    (0.5710, 0.5663, 0.6151, 0.6183, 0.5963, 0.6075, 0.6448, 0.6522),
    (0.7617, 0.7662, 0.8081, 0.7985, 0.7817, 0.7895, 0.8169, 0.8054),
    (0.5300, 0.5265, 0.5964, 0.5877, 0.5825, 0.5719, 0.6081, 0.6099),
    (0.2518, 0.2489, 0.2634, 0.2668, 0.2964, 0.2994, 0.3111, 0.3079),
    (0.4115, 0.4191, 0.4484, 0.4515, 0.4399, 0.4402, 0.4710, 0.4678),
    (0.4820, 0.4999, 0.5262, 0.5263, 0.5236, 0.5309, 0.5477, 0.5568),
    (0.1365, 0.1398, 0.1734, 0.1750, 0.1573, 0.1561, 0.1837, 0.1846),
    (0.1684, 0.1738, 0.1984, 0.1998, 0.1955, 0.2042, 0.2248, 0.2302),
    (0.4169, 0.4148, 0.4914, 0.4906, 0.4788, 0.4676, 0.5387, 0.5465),
    (0.1667, 0.1929, 0.2321, 0.2302, 0.2169, 0.2362, 0.2633, 0.2620),
    (0.0479, 0.0513, 0.0520, 0.0528, 0.0631, 0.0619, 0.0576, 0.0576),
    (0.1150, 0.1360, 0.1716, 0.1717, 0.1925, 0.1964, 0.1932, 0.1963),
    (0.1087, 0.1296, 0.1824, 0.1862, 0.1646, 0.1773, 0.2284, 0.2269),
    (0.1231, 0.1660, 0.1386, 0.1370, 0.1334, 0.1262, 0.1856, 0.1840),
    (0.3321, 0.4074, 0.4873, 0.4915, 0.4540, 0.5060, 0.5355, 0.5384),
    (0.0539, 0.0766, 0.0858, 0.0847, 0.0875, 0.1017, 0.0812, 0.0832),
    (0.0198, 0.0371, 0.0280, 0.0284, 0.0416, 0.0589, 0.0306, 0.0312),
    (0.1188, 0.1190, 0.1163, 0.1169, 0.1265, 0.1446, 0.1515, 0.1538),
    (0.0070, 0.0179, 0.0175, 0.0177, 0.0244, 0.0389, 0.0153, 0.0157),
    (0.1074, 0.1164, 0.0852, 0.0847, 0.1169, 0.1380, 0.1077, 0.1090),
    (0.0434, 0.0417, 0.0440, 0.0443, 0.0478, 0.0501, 0.0559, 0.0555),
    (0.4830, 0.4064, 0.4440, 0.4426, 0.4533, 0.4390, 0.5268, 0.5197),
    (0.0930, 0.0921, 0.2214, 0.2181, 0.2642, 0.2918, 0.2858, 0.2840),
    (0.1495, 0.0927, 0.1174, 0.1153, 0.1518, 0.1441, 0.2388, 0.2374),
)

# Printed mean rows: category -> (prevalence mean, *one value per column).
PUBLISHED_MEANS = {
    "All": (0.0385, 0.2718, 0.2774, 0.3078, 0.3082, 0.3102, 0.3170, 0.3389, 0.3394),
    "Head": (0.0947, 0.5014, 0.5046, 0.5433, 0.5446, 0.5391, 0.5399, 0.5655, 0.5658),
    "Medium": (0.0209, 0.2000, 0.2082, 0.2435, 0.2434, 0.2386, 0.2425, 0.2711, 0.2741),
    "Tail": (0.0050, 0.1350, 0.1415, 0.1646, 0.1645, 0.1737, 0.1856, 0.2028, 0.2027),
    "Tail-U": (0.0037, 0.1753, 0.1499, 0.1824, 0.1810, 0.1806, 0.1795, 0.2430, 0.2411),
}


def mimic_descriptors(counts: dict[str, dict[str, int]] | None = None) -> list[DatasetDescriptor]:
    """MIMIC first so registry order equals the published row order."""
    counts = counts or {}
    return [
        DatasetDescriptor("mimic", MIMIC_LABELS, counts.get("mimic")),
        DatasetDescriptor("nih", NIH_LABELS, counts.get("nih")),
        DatasetDescriptor("chexpert", CHEXPERT_LABELS, counts.get("chexpert")),
        DatasetDescriptor("padchest", PADCHEST_LABELS, counts.get("padchest")),
    ]


def mimic_registry(counts: dict[str, dict[str, int]] | None = None) -> LabelRegistry:
    return build_registry(mimic_descriptors(counts), aliases=LABEL_ALIASES)


def mimic_category_map(registry: LabelRegistry | None = None) -> CategoryMap:
    registry = registry or mimic_registry()
    cmap = CategoryMap({registry.index(k): Category(v) for k, v in MIMIC_CATEGORIES.items()})
    return cmap.with_tail_unique(tail_unique(registry, cmap, "mimic"))


def mimic_document(counts: dict[str, dict[str, int]] | None = None) -> RegistryDocument:
    return RegistryDocument(
        mimic_registry(counts), "mimic", DEFAULT_THRESHOLDS["mimic"], dict(MIMIC_CATEGORIES)
    )
